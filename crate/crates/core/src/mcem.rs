//! Monte Carlo EM for the process hyperparameters.
//!
//! Each iteration samples factor scores under the current parameters,
//! post-processes and aligns them, maximises their likelihood, and accepts the
//! new parameters only when an asymptotic lower bound on the ascent
//!
//! `LB = ΔQ̃ - sqrt(ζ̂ / R) z_{1-α}`
//!
//! is positive. `ΔQ̃` is the mean per-draw log-likelihood ratio and `ζ̂` its
//! batch-means variance. A rejection continues the same chain for `R/m` more
//! sweeps; the run stops after more than `W` rejections.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::align::{align_chain, AlignOptions, SignedPermutation};
use crate::error::{Error, Result};
use crate::gibbs::{ChainConfig, Draw, Sampler};
use crate::kcf::{build_sigma_y, factor_correlation, DgpParams, ProcessModel};
use crate::mle::{fit_mle, loglik_per_draw, MleOptions, SampleBank};
use crate::model::{Dataset, Hyperparams, ModelState};
use crate::rng::{stream, Stage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McemConfig {
    /// Initial number of sweeps per iteration.
    pub r0: usize,
    /// A rejection adds `R / m` sweeps.
    pub m: usize,
    /// Maximum number of sample-size increases.
    pub w_max: usize,
    pub alpha: f64,
    /// Leading fraction of each iteration's sweeps discarded.
    pub burn_in_frac: f64,
    /// Thinning keeps at most this many draws for the M-step.
    pub max_bank: usize,
    pub n_batches: usize,
    /// Hard cap on iterations regardless of the stopping rule.
    pub max_iterations: usize,
    pub optimizer_restarts: usize,
    /// Treat the Monte Carlo variance as zero (testing only).
    pub force_zero_variance: bool,
}

impl Default for McemConfig {
    fn default() -> Self {
        McemConfig {
            r0: 200,
            m: 2,
            w_max: 5,
            alpha: 0.25,
            burn_in_frac: 0.2,
            max_bank: 500,
            n_batches: 20,
            max_iterations: 50,
            optimizer_restarts: 5,
            force_zero_variance: false,
        }
    }
}

impl McemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.r0 < 10 {
            return Err(Error::invalid("initial sample size must be at least 10"));
        }
        if self.m < 1 {
            return Err(Error::invalid("growth divisor must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(Error::invalid("alpha must lie in (0, 0.5)"));
        }
        if !(0.0..1.0).contains(&self.burn_in_frac) {
            return Err(Error::invalid("burn-in fraction must lie in [0, 1)"));
        }
        if self.max_bank < 4 || self.n_batches < 2 || self.max_iterations == 0 {
            return Err(Error::invalid("bank size, batch count and iteration cap are too small"));
        }
        Ok(())
    }
}

/// Mean log-likelihood ratio of `theta_new` over `theta_old` and its per-draw
/// values.
pub fn delta_q(bank: &SampleBank, theta_new: &DgpParams, theta_old: &DgpParams) -> Result<(f64, Vec<f64>)> {
    let new = loglik_per_draw(theta_new, bank)?;
    let old = loglik_per_draw(theta_old, bank)?;
    let g: Vec<f64> = new.iter().zip(&old).map(|(a, b)| a - b).collect();
    let mean = g.iter().sum::<f64>() / g.len() as f64;
    Ok((mean, g))
}

/// Batch-means estimate of the variance of `g`, scaled to a single draw:
/// `B/(n_b - 1) Σ (batch mean - grand mean)²` over `n_b` batches of length
/// `B`; trailing values that do not fill a batch are dropped.
pub fn batch_means_var(g: &[f64], n_batches: usize) -> Result<f64> {
    if n_batches < 2 {
        return Err(Error::invalid("batch means needs at least two batches"));
    }
    let b = g.len() / n_batches;
    if b == 0 {
        return Err(Error::invalid(format!("{} values cannot fill {n_batches} batches", g.len())));
    }
    let means: Vec<f64> = g.chunks_exact(b).take(n_batches).map(|c| c.iter().sum::<f64>() / b as f64).collect();
    let grand = means.iter().sum::<f64>() / n_batches as f64;
    let ss: f64 = means.iter().map(|m| (m - grand).powi(2)).sum();
    Ok(b as f64 / (n_batches - 1) as f64 * ss)
}

pub fn normal_quantile(p: f64) -> f64 {
    Normal::new(0.0, 1.0).expect("standard normal").inverse_cdf(p)
}

pub fn lower_bound(delta_q: f64, zeta: f64, r_remain: usize, alpha: f64) -> f64 {
    delta_q - (zeta / r_remain as f64).sqrt() * normal_quantile(1.0 - alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McemRecord {
    pub iteration: usize,
    /// Sweeps generated under the current parameters.
    pub r: usize,
    /// Draws passed to the M-step.
    pub r_remain: usize,
    pub delta_q: f64,
    pub zeta: f64,
    pub lower_bound: f64,
    pub accepted: bool,
    /// Sample-size increases so far.
    pub w: usize,
    pub mle_converged: bool,
    /// Lag-zero factor correlation of the candidate parameters.
    pub correlation: Vec<Vec<f64>>,
    pub params: DgpParams,
}

#[derive(Clone, Debug)]
pub struct McemResult {
    pub theta: DgpParams,
    pub trace: Vec<McemRecord>,
    /// Last chain state, in the frame of `theta`.
    pub final_state: ModelState,
    pub hit_iteration_cap: bool,
}

fn post_process(raw: &[Draw], cfg: &McemConfig) -> Vec<Draw> {
    let burn = (cfg.burn_in_frac * raw.len() as f64).floor() as usize;
    let rest = &raw[burn.min(raw.len().saturating_sub(1))..];
    let thin = rest.len().div_ceil(cfg.max_bank).max(1);
    let last = rest.len() - 1;
    rest.iter().enumerate().filter(|(i, _)| (last - i).is_multiple_of(thin)).map(|(_, d)| d.clone()).collect()
}

fn matrix_rows(m: &nalgebra::DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

/// Runs the MCEM loop from `init_state` and `init_theta`.
#[allow(clippy::too_many_arguments)]
pub fn run_mcem(
    data: &Dataset,
    hyper: &Hyperparams,
    config: &McemConfig,
    model: ProcessModel,
    init_state: ModelState,
    init_theta: &DgpParams,
    seed: u64,
) -> Result<McemResult> {
    config.validate()?;
    let mut theta = match model {
        ProcessModel::Dgp => init_theta.clone(),
        ProcessModel::Igp => init_theta.without_shared(),
    };
    let sigma = build_sigma_y(&theta, &data.grid, true)?;
    let mut sampler = Sampler::new(data, hyper, sigma, init_state)?;
    let mut rng = stream(seed, Stage::Mcem, 0);
    let every = |n: usize| ChainConfig { n_iter: n, burn_in: 0, thin: 1 };
    let mut r = config.r0;
    let mut w = 0;
    let mut raw = sampler.run(&every(r), None, &mut rng)?;
    let mut trace = Vec::new();
    let mut hit_cap = true;

    for iteration in 1..=config.max_iterations {
        let mut draws = post_process(&raw, config);
        let last = draws.len() - 1;
        let aligned = align_chain(&mut draws, last, AlignOptions::default())?;
        let frame: SignedPermutation = aligned.transforms[last].clone();
        let bank = SampleBank {
            k: theta.k(),
            times: data.grid.times.clone(),
            draws: draws.into_iter().map(|d| d.y).collect(),
            mcem_iteration: iteration,
            chain: 0,
        };
        let opts = MleOptions {
            model,
            restarts: config.optimizer_restarts,
            seed: seed.wrapping_add(iteration as u64),
            ..MleOptions::default()
        };
        let fit = fit_mle(&bank, &theta, &opts).map_err(|e| e.at_stage("M-step"))?;
        let (dq, g) = delta_q(&bank, &fit.params, &theta)?;
        let zeta = if config.force_zero_variance {
            0.0
        } else {
            let nb = config.n_batches.min(g.len() / 2).max(2);
            batch_means_var(&g, nb)?
        };
        let lb = lower_bound(dq, zeta, bank.len(), config.alpha);
        let accepted = lb > 0.0;
        if !accepted {
            w += 1;
        }
        trace.push(McemRecord {
            iteration,
            r,
            r_remain: bank.len(),
            delta_q: dq,
            zeta,
            lower_bound: lb,
            accepted,
            w,
            mle_converged: fit.converged,
            correlation: matrix_rows(&factor_correlation(&fit.params)),
            params: fit.params.clone(),
        });
        log::info!(
            "mcem iteration {iteration}: R = {r}, dQ = {dq:.4e}, zeta = {zeta:.4e}, LB = {lb:.4e}, {}",
            if accepted { "accepted" } else { "rejected" }
        );
        if accepted {
            theta = fit.params;
            if !frame.is_identity() {
                sampler.state = frame.apply_state(&sampler.state);
            }
            sampler.set_sigma(build_sigma_y(&theta, &data.grid, true)?)?;
            raw = sampler.run(&every(r), None, &mut rng)?;
        } else {
            if w > config.w_max {
                hit_cap = false;
                break;
            }
            let extra = (r / config.m).max(1);
            r += extra;
            raw.extend(sampler.run(&every(extra), None, &mut rng)?);
        }
    }
    if hit_cap {
        log::warn!("mcem stopped at the iteration cap of {}", config.max_iterations);
    }
    Ok(McemResult { theta, trace, final_state: sampler.state, hit_iteration_cap: hit_cap })
}
