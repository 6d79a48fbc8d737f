//! Dense linear algebra helpers shared by the covariance, likelihood and
//! sampling code.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative jitter levels tried, in order, when a Cholesky factorisation fails.
pub const JITTER_LEVELS: [f64; 5] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6];

/// A Cholesky factor together with the absolute jitter that was added to the
/// diagonal to obtain it (zero when none was needed).
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// Quadratic form `bᵀ A⁻¹ b` through one triangular solve.
    pub fn inv_quad(&self, b: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let mut v = b.clone();
        l.solve_lower_triangular_mut(&mut v);
        v.norm_squared()
    }

    /// Draws `A⁻¹ b + L⁻ᵀ z` with `z` standard normal, where `A = L Lᵀ`.
    /// This samples from N(A⁻¹ b, A⁻¹) when `A` is a precision matrix.
    pub fn sample_from_precision<R: Rng + ?Sized>(&self, b: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let mean = self.solve(b);
        let mut z = standard_normal_vec(rng, b.len());
        self.chol.l_dirty().tr_solve_lower_triangular_mut(&mut z);
        mean + z
    }
}

/// Cholesky factorisation with the escalating jitter policy: on failure add
/// `eps * mean(diag)` for each `eps` in [`JITTER_LEVELS`].
pub fn cholesky_jittered(m: &DMatrix<f64>, context: &str) -> Result<Factor> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::Degenerate { context: format!("{context} (non-finite entries)"), jitter: Vec::new() });
    }
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(Factor { chol, jitter: 0.0 });
    }
    let n = m.nrows();
    let mean_diag = if n == 0 { 0.0 } else { m.diagonal().mean().abs() };
    let scale = if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut tried = Vec::with_capacity(JITTER_LEVELS.len());
    for eps in JITTER_LEVELS {
        let jitter = eps * scale;
        tried.push(jitter);
        let mut jm = m.clone();
        for i in 0..n {
            jm[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jm) {
            return Ok(Factor { chol, jitter });
        }
    }
    Err(Error::Degenerate { context: context.to_string(), jitter: tried })
}

/// Symmetric square root factor `F` with `F Fᵀ = M⁺`, where `M⁺` is `M` with
/// negative eigenvalues clamped to zero. Used for conditional covariances,
/// which may be exactly singular (e.g. prediction at an observed knot).
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    if n == 0 {
        return DMatrix::zeros(0, 0);
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut f = eig.eigenvectors.clone();
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = if lam > 0.0 { lam.sqrt() } else { 0.0 };
        f.column_mut(j).scale_mut(s);
    }
    f
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

/// Log density of N(0, A) at `x` given a factor of `A`.
pub fn mvn_logpdf_zero_mean(factor: &Factor, x: &DVector<f64>) -> f64 {
    let d = x.len() as f64;
    -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + factor.log_det() + factor.inv_quad(x))
}

/// Maximum absolute entrywise difference.
pub fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
