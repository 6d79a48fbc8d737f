//! Maximum-likelihood estimation of the process hyperparameters from a bank
//! of sampled factor scores.
//!
//! Every subject and draw shares one covariance on the pooled grid, so the
//! likelihood only needs the scatter matrix `S = Σ_r Σ_i vec(Y_iᵀ) vec(Y_iᵀ)ᵀ`
//! and the count `N = R·n`:
//!
//! `ln L = -½ [N ln|Σ| + tr(Σ⁻¹ S) + N d ln 2π]`,
//!
//! with gradient `½ tr(W ∂Σ)` where `W = Σ⁻¹ S Σ⁻¹ - N Σ⁻¹`.

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcf::{self, DgpParams, ProcessModel};
use crate::linalg::{cholesky_jittered, Factor};
use crate::optim::{minimize, LbfgsOptions};
use crate::rng::{stream, Stage};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Aligned factor-score draws on a common grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleBank {
    pub k: usize,
    pub times: Vec<f64>,
    /// `draws[r][i]` is the `k × q` score matrix of subject `i` in draw `r`.
    pub draws: Vec<Vec<DMatrix<f64>>>,
    pub mcem_iteration: usize,
    pub chain: usize,
}

impl SampleBank {
    pub fn new(k: usize, times: Vec<f64>, draws: Vec<Vec<DMatrix<f64>>>) -> Result<Self> {
        let b = SampleBank { k, times, draws, mcem_iteration: 0, chain: 0 };
        b.validate()?;
        Ok(b)
    }

    pub fn q(&self) -> usize {
        self.times.len()
    }

    pub fn n(&self) -> usize {
        self.draws.first().map(Vec::len).unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.draws.is_empty() {
            return Err(Error::invalid("sample bank is empty"));
        }
        let n = self.n();
        if n == 0 {
            return Err(Error::invalid("sample bank draws have no subjects"));
        }
        for (r, d) in self.draws.iter().enumerate() {
            if d.len() != n {
                return Err(Error::dim(format!("draw {r} has {} subjects, expected {n}", d.len())));
            }
            for y in d {
                if y.shape() != (self.k, self.q()) {
                    return Err(Error::dim(format!(
                        "draw {r} holds a {:?} score matrix, expected ({}, {})",
                        y.shape(),
                        self.k,
                        self.q()
                    )));
                }
                if y.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(format!("draw {r} has non-finite scores")));
                }
            }
        }
        Ok(())
    }

    fn scatter_of(draw: &[DMatrix<f64>], d: usize) -> DMatrix<f64> {
        let mut s = DMatrix::zeros(d, d);
        for y in draw {
            let v = vec_t(y);
            s.syger(1.0, &v, &v, 1.0);
        }
        s.fill_upper_triangle_with_lower_triangle();
        s
    }

    /// Scatter matrix pooled over draws and subjects.
    ///
    /// Partial sums over fixed chunks are added in order, so the result does
    /// not depend on thread scheduling.
    pub fn scatter(&self) -> DMatrix<f64> {
        const CHUNK: usize = 16;
        let d = self.k * self.q();
        let partial: Vec<DMatrix<f64>> = self
            .draws
            .par_chunks(CHUNK)
            .map(|chunk| chunk.iter().fold(DMatrix::zeros(d, d), |acc, draw| acc + Self::scatter_of(draw, d)))
            .collect();
        partial.into_iter().fold(DMatrix::zeros(d, d), |a, b| a + b)
    }
}

/// `vec(Yᵀ)` of a `k × q` matrix: factor-major stacking of its rows.
pub fn vec_t(y: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(y.transpose().as_slice())
}

/// Inverse of [`vec_t`].
pub fn unvec_t(v: &[f64], k: usize, q: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(k, q, v)
}

fn check_bank(params: &DgpParams, bank: &SampleBank) -> Result<()> {
    bank.validate()?;
    if params.k() != bank.k {
        return Err(Error::dim(format!("parameters have {} factors, bank has {}", params.k(), bank.k)));
    }
    Ok(())
}

fn factor_for(params: &DgpParams, times: &[f64]) -> Result<Factor> {
    params.validate()?;
    let sigma = kcf::assemble(params, times, false);
    cholesky_jittered(&sigma, "factor covariance in likelihood")
}

/// Summed log-density of every subject in every draw under `N(0, Σ_Y)`.
pub fn dgp_loglik(params: &DgpParams, bank: &SampleBank) -> Result<f64> {
    Ok(loglik_per_draw(params, bank)?.iter().sum())
}

/// Log-density of each draw (summed over subjects).
pub fn loglik_per_draw(params: &DgpParams, bank: &SampleBank) -> Result<Vec<f64>> {
    check_bank(params, bank)?;
    let factor = factor_for(params, &bank.times)?;
    let d = (bank.k * bank.q()) as f64;
    let const_term = d * LN_2PI + factor.log_det();
    Ok(bank
        .draws
        .par_iter()
        .map(|draw| draw.iter().map(|y| -0.5 * (const_term + factor.inv_quad(&vec_t(y)))).sum())
        .collect())
}

/// Sufficient statistics of a bank for the likelihood.
#[derive(Clone, Debug)]
pub struct BankStats {
    pub k: usize,
    pub times: Vec<f64>,
    pub scatter: DMatrix<f64>,
    pub count: f64,
}

impl BankStats {
    pub fn from_bank(bank: &SampleBank) -> Result<Self> {
        bank.validate()?;
        Ok(BankStats {
            k: bank.k,
            times: bank.times.clone(),
            scatter: bank.scatter(),
            count: (bank.len() * bank.n()) as f64,
        })
    }

    pub fn dim(&self) -> usize {
        self.k * self.times.len()
    }
}

/// Log-likelihood and its gradient with respect to the log-scale parameter
/// vector of `model`.
pub fn loglik_and_gradient(stats: &BankStats, model: ProcessModel, log_params: &[f64]) -> Result<(f64, Vec<f64>)> {
    let params = DgpParams::from_log_vec(stats.k, model, log_params)?;
    let factor = factor_for(&params, &stats.times)?;
    let inv = factor.inverse();
    let n = stats.count;
    let d = stats.dim() as f64;
    let inv_s = &inv * &stats.scatter;
    let ll = -0.5 * (n * factor.log_det() + inv_s.trace() + n * d * LN_2PI);
    let w = &inv_s * &inv - &inv * n;
    let grad = covariance_gradient(&params, model, &stats.times, &w);
    Ok((ll, grad))
}

/// `½ tr(W ∂Σ/∂θ)` for each log-scale parameter `θ`.
pub fn covariance_gradient(params: &DgpParams, model: ProcessModel, times: &[f64], w: &DMatrix<f64>) -> Vec<f64> {
    let k = params.k();
    let q = times.len();
    let width = match model {
        ProcessModel::Dgp => 4,
        ProcessModel::Igp => 2,
    };
    let mut grad = vec![0.0; DgpParams::n_free(k, model)];
    let noise_idx = grad.len() - 1;
    let psi2 = params.noise_sd * params.noise_sd;
    // index of [ln v0, ln B0, ln v1, ln B1] for factor a, None when pinned
    let slot = |a: usize, which: usize| -> Option<usize> {
        match model {
            ProcessModel::Dgp => Some(a * width + which),
            ProcessModel::Igp => (which >= 2).then(|| a * width + which - 2),
        }
    };
    for a in 0..k {
        let fa = &params.factors[a];
        for b in 0..k {
            let fb = &params.factors[b];
            for j in 0..q {
                for l in 0..q {
                    let wv = w[(a * q + j, b * q + l)];
                    if wv == 0.0 {
                        continue;
                    }
                    let dt = times[j] - times[l];
                    let dt2 = dt * dt;
                    if a == b {
                        let t0 = kcf::shared_auto(fa, dt);
                        let t1 = kcf::own_auto(fa, dt);
                        if let Some(s) = slot(a, 0) {
                            grad[s] += wv * 2.0 * t0;
                            grad[s + 1] += wv * t0 * (-0.5 - 0.25 * fa.shared_prec * dt2);
                        }
                        let s = slot(a, 2).expect("own kernel is always free");
                        grad[s] += wv * 2.0 * t1;
                        grad[s + 1] += wv * t1 * (-0.5 - 0.25 * fa.own_prec * dt2);
                        if j == l {
                            grad[noise_idx] += wv * psi2;
                        }
                    } else if let (Some(sa), Some(sb)) = (slot(a, 0), slot(b, 0)) {
                        let c = kcf::cross_cov_unchecked(params, a, b, dt);
                        let (ba, bb) = (fa.shared_prec, fb.shared_prec);
                        let sum = ba + bb;
                        grad[sa] += wv * c;
                        grad[sb] += wv * c;
                        grad[sa + 1] += wv * c * ba * (-0.5 / sum - 0.5 * dt2 * bb * bb / (sum * sum));
                        grad[sb + 1] += wv * c * bb * (-0.5 / sum - 0.5 * dt2 * ba * ba / (sum * sum));
                    }
                }
            }
        }
    }
    grad.iter_mut().for_each(|g| *g *= 0.5);
    grad
}

#[derive(Clone, Debug)]
pub struct MleOptions {
    pub model: ProcessModel,
    pub lbfgs: LbfgsOptions,
    /// Jittered restarts tried when the first run does not converge.
    pub restarts: usize,
    /// Standard deviation of the log-scale restart perturbation.
    pub restart_sd: f64,
    pub seed: u64,
}

impl Default for MleOptions {
    fn default() -> Self {
        MleOptions {
            model: ProcessModel::Dgp,
            lbfgs: LbfgsOptions { max_iter: 300, gtol: 1e-6, ftol: 1e-12, ..Default::default() },
            restarts: 5,
            restart_sd: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MleReport {
    pub params: DgpParams,
    /// Summed log-density at the solution.
    pub objective: f64,
    pub initial_objective: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub restarts_used: usize,
}

/// Maximises [`dgp_loglik`] over the log-scale parameters, starting at `init`.
pub fn fit_mle(bank: &SampleBank, init: &DgpParams, opts: &MleOptions) -> Result<MleReport> {
    check_bank(init, bank)?;
    init.validate()?;
    let stats = BankStats::from_bank(bank)?;
    fit_mle_stats(&stats, init, opts)
}

pub fn fit_mle_stats(stats: &BankStats, init: &DgpParams, opts: &MleOptions) -> Result<MleReport> {
    let model = opts.model;
    let k = stats.k;
    let scale = 1.0 / stats.count;
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let (ll, g) = loglik_and_gradient(stats, model, x)?;
        Ok((-ll * scale, g.into_iter().map(|v| -v * scale).collect()))
    };
    let x0 = init.to_log_vec(model);
    let (f0, _) = objective(&x0)?;
    let mut best = minimize(objective, &x0, &opts.lbfgs)?;
    let mut total_iter = best.iterations;
    let mut restarts_used = 0;
    if !best.converged {
        for r in 0..opts.restarts {
            restarts_used += 1;
            let mut rng = stream(opts.seed, Stage::Optimizer, r as u64);
            let normal = Normal::new(0.0, opts.restart_sd).expect("positive sd");
            let start: Vec<f64> = x0.iter().map(|v| v + normal.sample(&mut rng)).collect();
            let Ok(run) = minimize(objective, &start, &opts.lbfgs) else { continue };
            total_iter += run.iterations;
            let better = run.f < best.f;
            let done = run.converged;
            if better {
                best = run;
            }
            if done && better {
                break;
            }
        }
    }
    let (x, f) = if best.f <= f0 { (best.x.clone(), best.f) } else { (x0.clone(), f0) };
    let params = DgpParams::from_log_vec(k, model, &x)?;
    let report = MleReport {
        params,
        objective: -f / scale,
        initial_objective: -f0 / scale,
        iterations: total_iter,
        converged: best.converged,
        grad_norm: best.grad_norm,
        restarts_used,
    };
    if !report.converged {
        log::warn!(
            "likelihood maximisation stopped without converging (|grad| = {:.3e} after {} iterations)",
            report.grad_norm,
            report.iterations
        );
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kcf::FactorKernel;
    use crate::linalg::standard_normal_vec;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn one_point_bank(y: f64) -> SampleBank {
        SampleBank::new(1, vec![0.0], vec![vec![DMatrix::from_element(1, 1, y)]]).unwrap()
    }

    /// Unit variance at a single point: amplitude chosen so v²√π/√B = 1.
    fn unit_params() -> DgpParams {
        DgpParams {
            factors: vec![FactorKernel {
                shared_amp: 0.0,
                shared_prec: 1.0,
                own_amp: (1.0 / std::f64::consts::PI.sqrt()).sqrt(),
                own_prec: 1.0,
            }],
            noise_sd: 0.0,
        }
    }

    #[test]
    fn standard_normal_examples() {
        let p = unit_params();
        assert_relative_eq!(dgp_loglik(&p, &one_point_bank(0.0)).unwrap(), -0.918_938_533_204_672_7, epsilon = 1e-12);
        assert_relative_eq!(dgp_loglik(&p, &one_point_bank(1.0)).unwrap(), -1.418_938_533_204_672_7, epsilon = 1e-12);
    }

    pub(crate) fn random_params(rng: &mut impl rand::Rng, k: usize) -> DgpParams {
        DgpParams {
            factors: (0..k)
                .map(|_| FactorKernel {
                    shared_amp: rng.random_range(0.2..1.2),
                    shared_prec: rng.random_range(0.2..2.0),
                    own_amp: rng.random_range(0.2..1.2),
                    own_prec: rng.random_range(0.2..2.0),
                })
                .collect(),
            noise_sd: rng.random_range(0.05..0.5),
        }
    }

    fn random_bank(rng: &mut impl rand::Rng, k: usize, q: usize, r: usize, n: usize) -> SampleBank {
        let times: Vec<f64> = (0..q).map(|j| j as f64 * 0.8).collect();
        let draws = (0..r)
            .map(|_| (0..n).map(|_| DMatrix::from_fn(k, q, |_, _| rng.random_range(-2.0..2.0))).collect())
            .collect();
        SampleBank::new(k, times, draws).unwrap()
    }

    #[test]
    fn matches_dense_inverse_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let p = random_params(&mut rng, 2);
        let bank = random_bank(&mut rng, 2, 2, 3, 2);
        let sigma = kcf::assemble(&p, &bank.times, false);
        let inv = sigma.clone().try_inverse().unwrap();
        let det = sigma.determinant();
        let mut oracle = 0.0;
        for draw in &bank.draws {
            for y in draw {
                let v = vec_t(y);
                oracle += -0.5 * ((2.0 * std::f64::consts::PI).powi(4) * det).ln()
                    - 0.5 * (v.transpose() * &inv * &v)[(0, 0)];
            }
        }
        assert_relative_eq!(dgp_loglik(&p, &bank).unwrap(), oracle, max_relative = 1e-10);
    }

    #[test]
    fn igp_equals_independent_single_outputs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let p = random_params(&mut rng, 3).without_shared();
        let bank = random_bank(&mut rng, 3, 4, 2, 3);
        let joint = dgp_loglik(&p, &bank).unwrap();
        let mut separate = 0.0;
        for a in 0..3 {
            let single = DgpParams { factors: vec![p.factors[a].clone()], noise_sd: p.noise_sd };
            let draws = bank.draws.iter().map(|d| d.iter().map(|y| y.rows(a, 1).into_owned()).collect()).collect();
            let sub = SampleBank::new(1, bank.times.clone(), draws).unwrap();
            separate += dgp_loglik(&single, &sub).unwrap();
        }
        assert_relative_eq!(joint, separate, epsilon = 1e-8);
    }

    #[test]
    fn permuting_draws_leaves_loglik_unchanged() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let p = random_params(&mut rng, 2);
        let bank = random_bank(&mut rng, 2, 3, 5, 2);
        let mut rev = bank.clone();
        rev.draws.reverse();
        assert_relative_eq!(dgp_loglik(&p, &bank).unwrap(), dgp_loglik(&p, &rev).unwrap(), max_relative = 1e-13);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        for model in [ProcessModel::Dgp, ProcessModel::Igp] {
            let p = random_params(&mut rng, 2);
            let bank = random_bank(&mut rng, 2, 4, 3, 2);
            let stats = BankStats::from_bank(&bank).unwrap();
            let x = p.to_log_vec(model);
            let (_, g) = loglik_and_gradient(&stats, model, &x).unwrap();
            for i in 0..x.len() {
                let h = 1e-5;
                let mut xp = x.clone();
                xp[i] += h;
                let mut xm = x.clone();
                xm[i] -= h;
                let fd = (loglik_and_gradient(&stats, model, &xp).unwrap().0
                    - loglik_and_gradient(&stats, model, &xm).unwrap().0)
                    / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-3), "{model:?} param {i}: fd {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn zero_bank_drives_amplitudes_down() {
        let bank = SampleBank::new(1, vec![0.0, 1.0], vec![vec![DMatrix::zeros(1, 2)]]).unwrap();
        let init = DgpParams::default_start(1, ProcessModel::Dgp);
        let r = fit_mle(&bank, &init, &MleOptions::default()).unwrap();
        assert!(r.objective.is_finite());
        assert!(r.objective >= r.initial_objective);
        let f = &r.params.factors[0];
        assert!(f.own_amp < 1e-3 && f.shared_amp < 1e-3, "{f:?}");
    }

    #[test]
    fn fit_from_truth_does_not_move_far() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let truth = DgpParams {
            factors: vec![
                FactorKernel { shared_amp: 0.6, shared_prec: 0.5, own_amp: 0.4, own_prec: 1.0 },
                FactorKernel { shared_amp: 0.5, shared_prec: 0.8, own_amp: 0.5, own_prec: 0.6 },
            ],
            noise_sd: 0.2,
        };
        let times: Vec<f64> = (0..8).map(|j| j as f64).collect();
        let sigma = kcf::build_sigma_points(&truth, &times, false).unwrap();
        let chol = cholesky_jittered(&sigma.matrix, "t").unwrap();
        let l = chol.chol.l();
        let draws = (0..200)
            .map(|_| (0..17).map(|_| unvec_t((&l * standard_normal_vec(&mut rng, 16)).as_slice(), 2, 8)).collect())
            .collect();
        let bank = SampleBank::new(2, times, draws).unwrap();
        let r = fit_mle(&bank, &truth, &MleOptions::default()).unwrap();
        assert!(r.objective >= r.initial_objective);
        let c0 = kcf::factor_correlation(&truth);
        let c1 = kcf::factor_correlation(&r.params);
        assert!((c0[(0, 1)] - c1[(0, 1)]).abs() < 0.1 * c0[(0, 1)].abs().max(0.1));
        // fitting from a neutral start recovers the cross-correlation
        let r2 = fit_mle(&bank, &DgpParams::default_start(2, ProcessModel::Dgp), &MleOptions::default()).unwrap();
        let c2 = kcf::factor_correlation(&r2.params);
        assert!(crate::linalg::max_abs_diff(&c0, &c2) < 0.15, "{c0} vs {c2}");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn vec_t_round_trip(k in 1usize..4, q in 1usize..5, seed in 0u64..1000) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let y = DMatrix::from_fn(k, q, |_, _| rng.random_range(-1.0..1.0));
            let v = vec_t(&y);
            prop_assert_eq!(v[(k - 1) * q], y[(k - 1, 0)]);
            prop_assert_eq!(unvec_t(v.as_slice(), k, q), y);
        }
    }
}
