//! End-to-end acceptance suite for `dgpfactor`; see `tests/acceptance.rs`.
