//! Kernel-convolution covariance for dependent Gaussian processes.
//!
//! Each factor trajectory is the sum of a shared process (a Gaussian kernel
//! convolved with white noise common to all factors), a factor-specific
//! process, and independent noise with standard deviation `psi`. All kernels
//! are `h(t) = v exp(-B t² / 2)`, which gives closed-form auto- and
//! cross-covariances.
//!
//! Matrices are ordered factor-major: row `a * q + j` is factor `a` at time
//! point `j`, i.e. the layout of `vec(Yᵀ)` for a `k × q` score matrix `Y`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::linalg::cholesky_jittered;

/// Whether factors share a common base process.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProcessModel {
    /// Dependent processes: shared-kernel parameters are free.
    Dgp,
    /// Independent processes: every shared-kernel amplitude is pinned to zero.
    Igp,
}

impl std::str::FromStr for ProcessModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dgp" => Ok(ProcessModel::Dgp),
            "igp" => Ok(ProcessModel::Igp),
            other => Err(Error::invalid(format!("unknown process model '{other}'"))),
        }
    }
}

/// Kernel parameters for one factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactorKernel {
    /// Amplitude of the kernel applied to the shared base process.
    pub shared_amp: f64,
    /// Precision of the shared kernel.
    pub shared_prec: f64,
    /// Amplitude of the kernel applied to this factor's own base process.
    pub own_amp: f64,
    /// Precision of the factor-specific kernel.
    pub own_prec: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgpParams {
    pub factors: Vec<FactorKernel>,
    /// Standard deviation of the per-point noise added to every factor.
    pub noise_sd: f64,
}

/// Lower and upper bound of every log-scale parameter during optimisation.
pub const LOG_BOUND: f64 = 10.0;

impl DgpParams {
    pub fn k(&self) -> usize {
        self.factors.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.is_empty() {
            return Err(Error::invalid("at least one factor is required"));
        }
        for (a, f) in self.factors.iter().enumerate() {
            let ok = f.shared_amp.is_finite()
                && f.own_amp.is_finite()
                && f.shared_amp >= 0.0
                && f.own_amp >= 0.0
                && f.shared_prec.is_finite()
                && f.own_prec.is_finite()
                && f.shared_prec > 0.0
                && f.own_prec > 0.0;
            if !ok {
                return Err(Error::invalid(format!("factor {a} has invalid kernel parameters {f:?}")));
            }
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::invalid(format!("noise sd {} must be >= 0", self.noise_sd)));
        }
        Ok(())
    }

    /// Neutral starting point: unit stationary variance split evenly between
    /// the shared and specific kernels (all on the specific kernel for IGP),
    /// unit precisions and a small noise term.
    pub fn default_start(k: usize, model: ProcessModel) -> Self {
        let noise_sd: f64 = 0.1;
        let signal = 1.0 - noise_sd * noise_sd;
        let per_kernel = match model {
            ProcessModel::Dgp => signal / 2.0,
            ProcessModel::Igp => signal,
        };
        let amp = (per_kernel / PI.sqrt()).sqrt();
        let factors = (0..k)
            .map(|_| FactorKernel {
                shared_amp: if model == ProcessModel::Dgp { amp } else { 0.0 },
                shared_prec: 1.0,
                own_amp: amp,
                own_prec: 1.0,
            })
            .collect();
        DgpParams { factors, noise_sd }
    }

    /// Number of free log-scale parameters under `model`.
    pub fn n_free(k: usize, model: ProcessModel) -> usize {
        match model {
            ProcessModel::Dgp => 4 * k + 1,
            ProcessModel::Igp => 2 * k + 1,
        }
    }

    /// Log-scale parameter vector. DGP layout per factor is
    /// `[ln v0, ln B0, ln v1, ln B1]`, IGP drops the shared pair; the last
    /// entry is `ln psi²`. Zero amplitudes map to the lower bound.
    pub fn to_log_vec(&self, model: ProcessModel) -> Vec<f64> {
        let lg = |x: f64| if x > 0.0 { x.ln().clamp(-LOG_BOUND, LOG_BOUND) } else { -LOG_BOUND };
        let mut v = Vec::with_capacity(Self::n_free(self.k(), model));
        for f in &self.factors {
            if model == ProcessModel::Dgp {
                v.push(lg(f.shared_amp));
                v.push(lg(f.shared_prec));
            }
            v.push(lg(f.own_amp));
            v.push(lg(f.own_prec));
        }
        v.push(lg(self.noise_sd * self.noise_sd));
        v
    }

    pub fn from_log_vec(k: usize, model: ProcessModel, v: &[f64]) -> Result<Self> {
        if v.len() != Self::n_free(k, model) {
            return Err(Error::dim(format!("expected {} log parameters, got {}", Self::n_free(k, model), v.len())));
        }
        let mut it = v.iter().copied();
        let mut next = || it.next().expect("length checked").exp();
        let mut factors = Vec::with_capacity(k);
        for _ in 0..k {
            let (shared_amp, shared_prec) = match model {
                ProcessModel::Dgp => (next(), next()),
                ProcessModel::Igp => (0.0, 1.0),
            };
            let own_amp = next();
            let own_prec = next();
            factors.push(FactorKernel { shared_amp, shared_prec, own_amp, own_prec });
        }
        let noise_sd = next().sqrt();
        Ok(DgpParams { factors, noise_sd })
    }

    /// Same parameters with the shared kernel removed (the IGP restriction).
    pub fn without_shared(&self) -> Self {
        let mut p = self.clone();
        for f in &mut p.factors {
            f.shared_amp = 0.0;
        }
        p
    }

    /// Stationary variance of factor `a` at a single point, noise included.
    pub fn stationary_variance(&self, a: usize) -> f64 {
        let f = &self.factors[a];
        f.shared_amp.powi(2) * PI.sqrt() / f.shared_prec.sqrt()
            + f.own_amp.powi(2) * PI.sqrt() / f.own_prec.sqrt()
            + self.noise_sd.powi(2)
    }
}

/// Pooled observation grid and per-subject index sets into it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub times: Vec<f64>,
    pub subjects: Vec<Vec<usize>>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, subjects: Vec<Vec<usize>>) -> Result<Self> {
        let g = TimeGrid { times, subjects };
        g.validate()?;
        Ok(g)
    }

    /// Grid where every subject is observed at every time.
    pub fn common(times: Vec<f64>, n: usize) -> Result<Self> {
        let all: Vec<usize> = (0..times.len()).collect();
        Self::new(times, vec![all; n])
    }

    pub fn q(&self) -> usize {
        self.times.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::invalid("time grid is empty"));
        }
        if self.times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("time grid has non-finite entries"));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("pooled time grid must be strictly increasing"));
        }
        for (i, s) in self.subjects.iter().enumerate() {
            if s.is_empty() {
                return Err(Error::invalid(format!("subject {i} has no observed times")));
            }
            if s.iter().any(|&j| j >= self.q()) {
                return Err(Error::invalid(format!("subject {i} has a time index out of range")));
            }
            if s.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid(format!("subject {i} time indices must be increasing")));
            }
        }
        Ok(())
    }

    /// Indices of the pooled grid the subject was not observed at.
    pub fn missing(&self, subject: usize) -> Vec<usize> {
        let obs = &self.subjects[subject];
        (0..self.q()).filter(|j| obs.binary_search(j).is_err()).collect()
    }
}

/// Dense `(k·q) × (k·q)` factor covariance, factor-major.
#[derive(Clone, Debug, PartialEq)]
pub struct CovMatrix {
    pub k: usize,
    /// Time of each point in the factor-major layout (length `q`).
    pub times: Vec<f64>,
    pub matrix: DMatrix<f64>,
    /// Set when the matrix was rescaled to unit diagonal.
    pub correlation: bool,
    /// Diagonal jitter the factorisation check needed (0 when none).
    pub jitter: f64,
}

impl CovMatrix {
    pub fn q(&self) -> usize {
        self.times.len()
    }

    pub fn index(&self, factor: usize, point: usize) -> usize {
        factor * self.q() + point
    }
}

/// Covariance of factor `a` with itself at time lag `dt`.
pub fn auto_cov(params: &DgpParams, a: usize, dt: f64, same_point: bool) -> Result<f64> {
    if !dt.is_finite() {
        return Err(Error::invalid("time lag must be finite"));
    }
    if a >= params.k() {
        return Err(Error::invalid(format!("factor {a} out of range for k = {}", params.k())));
    }
    Ok(auto_cov_unchecked(params, a, dt, same_point))
}

#[inline]
pub(crate) fn shared_auto(f: &FactorKernel, dt: f64) -> f64 {
    f.shared_amp * f.shared_amp * PI.sqrt() / f.shared_prec.sqrt() * (-0.25 * f.shared_prec * dt * dt).exp()
}

#[inline]
pub(crate) fn own_auto(f: &FactorKernel, dt: f64) -> f64 {
    f.own_amp * f.own_amp * PI.sqrt() / f.own_prec.sqrt() * (-0.25 * f.own_prec * dt * dt).exp()
}

#[inline]
pub(crate) fn auto_cov_unchecked(params: &DgpParams, a: usize, dt: f64, same_point: bool) -> f64 {
    let f = &params.factors[a];
    let nugget = if same_point { params.noise_sd * params.noise_sd } else { 0.0 };
    shared_auto(f, dt) + own_auto(f, dt) + nugget
}

/// Cross-covariance between factor `a` at time `t` and factor `b` at time
/// `t - dt`; only the shared process contributes.
pub fn cross_cov(params: &DgpParams, a: usize, b: usize, dt: f64) -> Result<f64> {
    if a == b {
        return Err(Error::invalid("cross_cov needs two distinct factors; use auto_cov"));
    }
    if a >= params.k() || b >= params.k() {
        return Err(Error::invalid("factor index out of range"));
    }
    if !dt.is_finite() {
        return Err(Error::invalid("time lag must be finite"));
    }
    Ok(cross_cov_unchecked(params, a, b, dt))
}

#[inline]
pub(crate) fn cross_cov_unchecked(params: &DgpParams, a: usize, b: usize, dt: f64) -> f64 {
    let fa = &params.factors[a];
    let fb = &params.factors[b];
    let sum = fa.shared_prec + fb.shared_prec;
    let b_ab = fa.shared_prec * fb.shared_prec / sum;
    fa.shared_amp * fb.shared_amp * (2.0 * PI).sqrt() / sum.sqrt() * (-0.5 * b_ab * dt * dt).exp()
}

/// Assembles the factor-major covariance over arbitrary points without the
/// positive-definiteness check. Distinct indices never receive the noise
/// term, even when their times coincide.
pub fn assemble(params: &DgpParams, points: &[f64], as_correlation: bool) -> DMatrix<f64> {
    let k = params.k();
    let q = points.len();
    let d = k * q;
    let mut m = DMatrix::zeros(d, d);
    let scale: Vec<f64> = if as_correlation {
        (0..k).map(|a| 1.0 / params.stationary_variance(a).sqrt()).collect()
    } else {
        vec![1.0; k]
    };
    for a in 0..k {
        for b in a..k {
            let s = scale[a] * scale[b];
            for j in 0..q {
                for l in 0..q {
                    let dt = points[j] - points[l];
                    let v = if a == b {
                        auto_cov_unchecked(params, a, dt, j == l)
                    } else {
                        cross_cov_unchecked(params, a, b, dt)
                    } * s;
                    m[(a * q + j, b * q + l)] = v;
                    m[(b * q + l, a * q + j)] = v;
                }
            }
        }
    }
    if as_correlation {
        // exact unit diagonal
        for i in 0..d {
            m[(i, i)] = 1.0;
        }
    }
    m
}

/// Covariance over the pooled grid.
pub fn build_sigma_y(params: &DgpParams, grid: &TimeGrid, as_correlation: bool) -> Result<CovMatrix> {
    build_sigma_points(params, &grid.times, as_correlation)
}

/// Covariance over an arbitrary list of points (e.g. pooled grid followed by
/// prediction times).
pub fn build_sigma_points(params: &DgpParams, points: &[f64], as_correlation: bool) -> Result<CovMatrix> {
    params.validate()?;
    if points.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("time points must be finite"));
    }
    if as_correlation && (0..params.k()).any(|a| params.stationary_variance(a) <= 0.0) {
        return Err(Error::invalid("correlation rescaling needs positive factor variances"));
    }
    let matrix = assemble(params, points, as_correlation);
    let factor = cholesky_jittered(&matrix, "factor covariance")?;
    Ok(CovMatrix { k: params.k(), times: points.to_vec(), matrix, correlation: as_correlation, jitter: factor.jitter })
}

/// Factor-major index list for the given point indices.
pub fn block_indices(k: usize, q: usize, points: &[usize]) -> Vec<usize> {
    let mut idx = Vec::with_capacity(k * points.len());
    for a in 0..k {
        for &j in points {
            idx.push(a * q + j);
        }
    }
    idx
}

/// Block of `full` with the selected time points on rows and columns, keeping
/// factor-major ordering.
pub fn sub_cov(full: &CovMatrix, row_times: &[usize], col_times: &[usize]) -> Result<DMatrix<f64>> {
    let q = full.q();
    if row_times.iter().chain(col_times).any(|&j| j >= q) {
        return Err(Error::invalid("time index out of range in sub_cov"));
    }
    let rows = block_indices(full.k, q, row_times);
    let cols = block_indices(full.k, q, col_times);
    Ok(select(&full.matrix, &rows, &cols))
}

pub(crate) fn select(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |r, c| m[(rows[r], cols[c])])
}

/// Lag-zero cross-correlation matrix between factors (`k × k`), noise
/// included in the variances.
pub fn factor_correlation(params: &DgpParams) -> DMatrix<f64> {
    let k = params.k();
    let var: Vec<f64> = (0..k).map(|a| params.stationary_variance(a)).collect();
    DMatrix::from_fn(
        k,
        k,
        |a, b| {
            if a == b {
                1.0
            } else {
                cross_cov_unchecked(params, a, b, 0.0) / (var[a] * var[b]).sqrt()
            }
        },
    )
}
