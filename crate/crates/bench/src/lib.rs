//! Criterion benchmarks for `dgpfactor`; see `benches/kernels.rs`.
