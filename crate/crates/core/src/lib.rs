//! Sparse Bayesian factor analysis of longitudinal high-dimensional data with
//! latent factor trajectories modelled as dependent Gaussian processes.
//!
//! The crate is organised bottom-up:
//!
//! * [`kcf`] builds the kernel-convolution covariance over factors and times.
//! * [`mle`] maximises the Gaussian-process likelihood of sampled factor scores.
//! * [`gibbs`] samples the remaining unknowns for fixed process hyperparameters.
//! * [`mcem`] alternates the two with an ascent-based sample size rule.
//! * [`align`] removes sign and label-switching ambiguity from posterior draws.
//! * [`diagnostics`] computes Rhat, loading summaries and evaluation metrics.
//! * [`simulate`] and [`init`] generate benchmark data and starting values.
//! * [`pipeline`], [`io`] and [`output`] tie everything into an end-to-end fit.

pub mod align;
pub mod diagnostics;
pub mod error;
pub mod gibbs;
pub mod init;
pub mod io;
pub mod kcf;
pub mod linalg;
pub mod mcem;
pub mod mle;
pub mod model;
pub mod optim;
pub mod output;
pub mod pipeline;
pub mod rng;
pub mod simulate;

pub use error::{Error, Result};
pub use kcf::{CovMatrix, DgpParams, FactorKernel, ProcessModel, TimeGrid};
pub use mle::{MleOptions, MleReport, SampleBank};
pub use model::{Dataset, Hyperparams, ModelState};
