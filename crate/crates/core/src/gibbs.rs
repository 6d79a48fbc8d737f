//! Blocked Gibbs sampler for fixed process hyperparameters.
//!
//! A sweep updates, in order: factor scores `Y` (observed times jointly, then
//! unobserved pooled times from the Gaussian-process conditional), inclusion
//! rows `Z_g·`, coefficient rows `A_g·`, subject-gene means, inclusion
//! probabilities, then the three variance families. The row updates use the
//! per-gene sufficient statistics
//!
//! `S = Σ_i Σ_j y_ij y_ijᵀ`, `b_g = Σ_i Σ_j y_ij r_gij`, `c_g = Σ_i Σ_j r_gij²`
//!
//! with `r = x - μ`, so the residual sum of squares of any loading row is
//! `c_g - 2 lᵀ b_g + lᵀ S l` and no `p q_i × k q_i` matrix is ever formed.

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcf::{self, block_indices, select, CovMatrix, DgpParams};
use crate::linalg::{cholesky_jittered, psd_factor, standard_normal_vec};
use crate::mle::{unvec_t, vec_t};
use crate::model::{Dataset, Hyperparams, ModelState};

/// Largest factor count for which inclusion rows are enumerated exactly.
pub const MAX_ENUM_K: usize = 12;

const PI_FLOOR: f64 = 1e-300;
const PI_CEIL: f64 = 1.0 - 1e-16;

fn clamp_var(v: f64) -> f64 {
    v.clamp(f64::MIN_POSITIVE, f64::MAX)
}

/// Draws from an inverse-gamma with the given shape and rate.
pub fn sample_inv_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    let g = Gamma::new(shape, 1.0 / rate).expect("positive shape and rate");
    clamp_var(1.0 / g.sample(rng))
}

/// Gaussian conditional of a set of target coordinates given observed ones.
#[derive(Clone, Debug)]
pub struct GpConditional {
    /// `Σ_to Σ_oo⁻¹`.
    pub gain: DMatrix<f64>,
    /// `F` with `F Fᵀ` the conditional covariance (clamped to PSD).
    pub root: DMatrix<f64>,
    pub cov: DMatrix<f64>,
}

impl GpConditional {
    /// `target` and `observed` index rows/columns of `sigma`.
    pub fn new(sigma: &DMatrix<f64>, target: &[usize], observed: &[usize]) -> Result<Self> {
        let s_oo = select(sigma, observed, observed);
        let s_ot = select(sigma, observed, target);
        let s_tt = select(sigma, target, target);
        let f = cholesky_jittered(&s_oo, "observed-point covariance")?;
        let gain = f.chol.solve(&s_ot).transpose();
        let cov = &s_tt - &gain * &s_ot;
        let root = psd_factor(&cov);
        Ok(GpConditional { gain, root, cov })
    }

    pub fn mean(&self, observed: &DVector<f64>) -> DVector<f64> {
        &self.gain * observed
    }

    pub fn sample<R: Rng + ?Sized>(&self, observed: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let z = standard_normal_vec(rng, self.root.ncols());
        self.mean(observed) + &self.root * z
    }
}

/// Per-observation-pattern quantities derived from `Σ_Y`.
#[derive(Clone, Debug)]
pub struct PatternCache {
    pub observed: Vec<usize>,
    pub missing: Vec<usize>,
    /// `Σ_{Y,obs}⁻¹`.
    pub prior_precision: DMatrix<f64>,
    pub missing_conditional: Option<GpConditional>,
}

/// `Σ_Y` plus the per-subject pieces the score update needs.
#[derive(Clone, Debug)]
pub struct SigmaCache {
    pub sigma: CovMatrix,
    pub subjects: Vec<Arc<PatternCache>>,
}

impl SigmaCache {
    pub fn new(sigma: CovMatrix, data: &Dataset) -> Result<Self> {
        if sigma.q() != data.q() {
            return Err(Error::dim(format!("covariance covers {} points, grid has {}", sigma.q(), data.q())));
        }
        let (k, q) = (sigma.k, sigma.q());
        let mut patterns: HashMap<Vec<usize>, Arc<PatternCache>> = HashMap::new();
        let mut subjects = Vec::with_capacity(data.n());
        for i in 0..data.n() {
            let obs = data.grid.subjects[i].clone();
            if let Some(c) = patterns.get(&obs) {
                subjects.push(Arc::clone(c));
                continue;
            }
            let missing = data.grid.missing(i);
            let oi = block_indices(k, q, &obs);
            let s_oo = select(&sigma.matrix, &oi, &oi);
            let prior_precision = cholesky_jittered(&s_oo, "observed-time factor covariance")?.inverse();
            let missing_conditional = if missing.is_empty() {
                None
            } else {
                Some(GpConditional::new(&sigma.matrix, &block_indices(k, q, &missing), &oi)?)
            };
            let c = Arc::new(PatternCache { observed: obs.clone(), missing, prior_precision, missing_conditional });
            patterns.insert(obs, Arc::clone(&c));
            subjects.push(c);
        }
        Ok(SigmaCache { sigma, subjects })
    }
}

/// Conditional for factor scores at new times given the pooled-grid scores.
#[derive(Clone, Debug)]
pub struct Predictor {
    pub new_times: Vec<f64>,
    pub k: usize,
    pub q: usize,
    pub conditional: GpConditional,
}

impl Predictor {
    /// Builds the extended correlation-form covariance over the pooled grid
    /// followed by `new_times`.
    pub fn new(params: &DgpParams, pooled: &[f64], new_times: &[f64]) -> Result<Self> {
        let mut points = pooled.to_vec();
        points.extend_from_slice(new_times);
        let ext = kcf::build_sigma_points(params, &points, true)?;
        Self::from_extended(&ext, pooled.len())
    }

    /// `ext` covers the `q` pooled points followed by the new points.
    pub fn from_extended(ext: &CovMatrix, q: usize) -> Result<Self> {
        let total = ext.q();
        if total <= q {
            return Err(Error::invalid("prediction needs at least one new time"));
        }
        let k = ext.k;
        let pooled: Vec<usize> = (0..q).collect();
        let new: Vec<usize> = (q..total).collect();
        let conditional =
            GpConditional::new(&ext.matrix, &block_indices(k, total, &new), &block_indices(k, total, &pooled))?;
        Ok(Predictor { new_times: ext.times[q..].to_vec(), k, q, conditional })
    }

    pub fn u(&self) -> usize {
        self.new_times.len()
    }

    pub fn sample_scores<R: Rng + ?Sized>(&self, y: &DMatrix<f64>, rng: &mut R) -> DMatrix<f64> {
        let v = self.conditional.sample(&vec_t(y), rng);
        unvec_t(v.as_slice(), self.k, self.u())
    }
}

/// Draws `X_i^new` for every subject: scores at the new times from the
/// process conditional, then expression around `μ_i + L Y^new`.
pub fn predict_x<R: Rng + ?Sized>(state: &ModelState, predictor: &Predictor, rng: &mut R) -> Vec<DMatrix<f64>> {
    let l = state.loadings();
    let p = state.p();
    let u = predictor.u();
    state
        .y
        .iter()
        .enumerate()
        .map(|(i, y)| {
            let y_new = predictor.sample_scores(y, rng);
            let mut x = &l * &y_new;
            for g in 0..p {
                let sd = state.phi2[g].sqrt();
                for j in 0..u {
                    let e: f64 = rng.sample(StandardNormal);
                    x[(g, j)] += state.mu[(i, g)] + sd * e;
                }
            }
            x
        })
        .collect()
}

/// Residuals `x - μ` of subject `i`.
fn centred(state: &ModelState, data: &Dataset, i: usize) -> DMatrix<f64> {
    let mut e = data.x[i].clone();
    for g in 0..data.p() {
        let m = state.mu[(i, g)];
        e.row_mut(g).add_scalar_mut(-m);
    }
    e
}

/// Observed-time scores of subject `i` as a `k × q_i` matrix.
fn observed_scores(state: &ModelState, data: &Dataset, i: usize) -> DMatrix<f64> {
    let obs = &data.grid.subjects[i];
    DMatrix::from_fn(state.k(), obs.len(), |a, j| state.y[i][(a, obs[j])])
}

/// Precision and linear term of the Gaussian conditional of `vec(Y_i,obsᵀ)`.
pub fn y_obs_conditional(
    state: &ModelState,
    data: &Dataset,
    cache: &SigmaCache,
    i: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let l = state.loadings();
    let inv_phi = DVector::from_iterator(state.p(), state.phi2.iter().map(|v| 1.0 / v));
    let mut l_scaled = l.clone();
    for (g, s) in inv_phi.iter().enumerate() {
        l_scaled.row_mut(g).scale_mut(*s);
    }
    let m = l.transpose() * &l_scaled;
    y_obs_conditional_with(&m, &l_scaled, state, data, cache, i)
}

fn y_obs_conditional_with(
    m: &DMatrix<f64>,
    l_scaled: &DMatrix<f64>,
    state: &ModelState,
    data: &Dataset,
    cache: &SigmaCache,
    i: usize,
) -> (DMatrix<f64>, DVector<f64>) {
    let k = state.k();
    let pc = &cache.subjects[i];
    let qi = pc.observed.len();
    let mut prec = pc.prior_precision.clone();
    for a in 0..k {
        for b in 0..k {
            let v = m[(a, b)];
            for j in 0..qi {
                prec[(a * qi + j, b * qi + j)] += v;
            }
        }
    }
    let bmat = l_scaled.transpose() * centred(state, data, i);
    (prec, vec_t(&bmat))
}

/// Draws every subject's factor scores.
pub fn update_y<R: Rng + ?Sized>(
    state: &mut ModelState,
    data: &Dataset,
    cache: &SigmaCache,
    rng: &mut R,
) -> Result<()> {
    let k = state.k();
    let l = state.loadings();
    let mut l_scaled = l.clone();
    for g in 0..state.p() {
        l_scaled.row_mut(g).scale_mut(1.0 / state.phi2[g]);
    }
    let m = l.transpose() * &l_scaled;
    for i in 0..data.n() {
        let (prec, rhs) = y_obs_conditional_with(&m, &l_scaled, state, data, cache, i);
        let f = cholesky_jittered(&prec, "factor-score posterior precision")?;
        let draw = f.sample_from_precision(&rhs, rng);
        let pc = &cache.subjects[i];
        let qi = pc.observed.len();
        for a in 0..k {
            for (j, &t) in pc.observed.iter().enumerate() {
                state.y[i][(a, t)] = draw[a * qi + j];
            }
        }
        if let Some(cond) = &pc.missing_conditional {
            let nm = pc.missing.len();
            let v = cond.sample(&draw, rng);
            for a in 0..k {
                for (m_idx, &t) in pc.missing.iter().enumerate() {
                    state.y[i][(a, t)] = v[a * nm + m_idx];
                }
            }
        }
    }
    Ok(())
}

/// Sufficient statistics for the loading-row updates.
#[derive(Clone, Debug)]
pub struct RowStats {
    /// `Σ y yᵀ` over observed (subject, time) pairs, `k × k`.
    pub s: DMatrix<f64>,
    /// Row `g` holds `b_g`, `p × k`.
    pub b: DMatrix<f64>,
    pub c: Vec<f64>,
}

pub fn row_stats(state: &ModelState, data: &Dataset) -> RowStats {
    let (k, p) = (state.k(), state.p());
    let mut s = DMatrix::zeros(k, k);
    let mut b = DMatrix::zeros(p, k);
    let mut c = vec![0.0; p];
    for i in 0..data.n() {
        let yo = observed_scores(state, data, i);
        let e = centred(state, data, i);
        s += &yo * yo.transpose();
        b += &e * yo.transpose();
        for (g, cg) in c.iter_mut().enumerate() {
            *cg += e.row(g).norm_squared();
        }
    }
    RowStats { s, b, c }
}

fn rss(stats: &RowStats, g: usize, l: &DVector<f64>) -> f64 {
    let b = stats.b.row(g).transpose();
    stats.c[g] - 2.0 * l.dot(&b) + (l.transpose() * &stats.s * l)[(0, 0)]
}

/// Normalised log-probabilities of the `2^k` configurations of `Z_g·`; bit
/// `a` of the configuration index is `Z_ga`.
pub fn z_row_log_probs(state: &ModelState, g: usize, stats: &RowStats) -> Result<Vec<f64>> {
    let k = state.k();
    if k > MAX_ENUM_K {
        return Err(Error::invalid(format!("inclusion enumeration supports k <= {MAX_ENUM_K}, got {k}")));
    }
    let ln_pi: Vec<f64> = state.pi.iter().map(|p| p.ln()).collect();
    let ln_1m: Vec<f64> = state.pi.iter().map(|p| (1.0 - p).ln()).collect();
    let phi2 = state.phi2[g];
    let mut lp = Vec::with_capacity(1 << k);
    for cfg in 0..(1usize << k) {
        let l = DVector::from_fn(k, |a, _| if cfg >> a & 1 == 1 { state.a[(g, a)] } else { 0.0 });
        let mut v = -0.5 * rss(stats, g, &l) / phi2;
        for a in 0..k {
            v += if cfg >> a & 1 == 1 { ln_pi[a] } else { ln_1m[a] };
        }
        lp.push(v);
    }
    let max = lp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + lp.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(lp.into_iter().map(|v| v - lse).collect())
}

pub fn update_z_row<R: Rng + ?Sized>(state: &mut ModelState, g: usize, stats: &RowStats, rng: &mut R) -> Result<()> {
    let lp = z_row_log_probs(state, g, stats)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut pick = lp.len() - 1;
    for (cfg, v) in lp.iter().enumerate() {
        acc += v.exp();
        if u < acc {
            pick = cfg;
            break;
        }
    }
    for a in 0..state.k() {
        state.z[(g, a)] = pick >> a & 1 == 1;
    }
    Ok(())
}

/// Precision and linear term of the Gaussian conditional of `A_g·`.
pub fn a_row_conditional(state: &ModelState, g: usize, stats: &RowStats) -> (DMatrix<f64>, DVector<f64>) {
    let k = state.k();
    let zg: Vec<f64> = (0..k).map(|a| if state.z[(g, a)] { 1.0 } else { 0.0 }).collect();
    let phi2 = state.phi2[g];
    let prec = DMatrix::from_fn(k, k, |a, b| {
        let v = zg[a] * stats.s[(a, b)] * zg[b] / phi2;
        if a == b {
            v + 1.0 / state.rho2[a]
        } else {
            v
        }
    });
    let rhs = DVector::from_fn(k, |a, _| zg[a] * stats.b[(g, a)] / phi2);
    (prec, rhs)
}

pub fn update_a_row<R: Rng + ?Sized>(state: &mut ModelState, g: usize, stats: &RowStats, rng: &mut R) -> Result<()> {
    let (prec, rhs) = a_row_conditional(state, g, stats);
    let f = cholesky_jittered(&prec, "coefficient-row posterior precision")?;
    let draw = f.sample_from_precision(&rhs, rng);
    for a in 0..state.k() {
        state.a[(g, a)] = draw[a];
    }
    Ok(())
}

/// Residuals `x - L y` of subject `i` at its observed times.
fn signal_residual(state: &ModelState, data: &Dataset, l: &DMatrix<f64>, i: usize) -> DMatrix<f64> {
    &data.x[i] - l * observed_scores(state, data, i)
}

/// Mean and variance of the conditional of `μ_ig` given its residual sum
/// `r = Σ_j (x_ijg - (L y_ij)_g)` over `q_i` observed times.
pub fn mu_conditional(mu_g: f64, sigma2: f64, phi2: f64, q_i: usize, r: f64) -> (f64, f64) {
    let var = 1.0 / (1.0 / sigma2 + q_i as f64 / phi2);
    (var * (mu_g / sigma2 + r / phi2), var)
}

pub fn update_mu<R: Rng + ?Sized>(state: &mut ModelState, data: &Dataset, hyper: &Hyperparams, rng: &mut R) {
    let l = state.loadings();
    for i in 0..data.n() {
        let e = signal_residual(state, data, &l, i);
        let qi = data.q_i(i);
        for g in 0..data.p() {
            let (m, v) = mu_conditional(hyper.mu_g[g], state.sigma2[g], state.phi2[g], qi, e.row(g).sum());
            let z: f64 = rng.sample(StandardNormal);
            state.mu[(i, g)] = m + v.sqrt() * z;
        }
    }
}

/// Beta parameters of the conditional of `π_a`.
pub fn pi_conditional(state: &ModelState, hyper: &Hyperparams, a: usize) -> (f64, f64) {
    let included = state.z.column(a).iter().filter(|z| **z).count() as f64;
    let p = state.p() as f64;
    (hyper.c0 + included, hyper.d0 + p - included)
}

pub fn update_pi<R: Rng + ?Sized>(state: &mut ModelState, hyper: &Hyperparams, rng: &mut R) {
    for a in 0..state.k() {
        let (al, be) = pi_conditional(state, hyper, a);
        let v: f64 = Beta::new(al, be).expect("positive beta parameters").sample(rng);
        state.pi[a] = v.clamp(PI_FLOOR, PI_CEIL);
    }
}

/// Inverse-gamma shape and rate of the conditional of `ρ_a²`.
pub fn rho_conditional(state: &ModelState, hyper: &Hyperparams, a: usize) -> (f64, f64) {
    let p = state.p() as f64;
    (hyper.c1 + 0.5 * p, hyper.d1 + 0.5 * state.a.column(a).norm_squared())
}

/// Inverse-gamma shape and rate of the conditional of `σ_g²`.
pub fn sigma_conditional(state: &ModelState, hyper: &Hyperparams, g: usize) -> (f64, f64) {
    let n = state.mu.nrows() as f64;
    let ss: f64 = state.mu.column(g).iter().map(|m| (m - hyper.mu_g[g]).powi(2)).sum();
    (hyper.c2 + 0.5 * n, hyper.d2 + 0.5 * ss)
}

/// Residual sum of squares `Σ_i Σ_j (x - μ - L y)²` for every gene.
pub fn gene_rss(state: &ModelState, data: &Dataset) -> Vec<f64> {
    let l = state.loadings();
    let mut out = vec![0.0; data.p()];
    for i in 0..data.n() {
        let e = signal_residual(state, data, &l, i);
        for (g, o) in out.iter_mut().enumerate() {
            let m = state.mu[(i, g)];
            *o += e.row(g).iter().map(|v| (v - m).powi(2)).sum::<f64>();
        }
    }
    out
}

/// Inverse-gamma shape and rate of the conditional of `φ_g²` given its RSS.
pub fn phi_conditional(hyper: &Hyperparams, total_obs: usize, rss: f64) -> (f64, f64) {
    (hyper.c3 + 0.5 * total_obs as f64, hyper.d3 + 0.5 * rss)
}

pub fn update_variances<R: Rng + ?Sized>(state: &mut ModelState, data: &Dataset, hyper: &Hyperparams, rng: &mut R) {
    for a in 0..state.k() {
        let (s, r) = rho_conditional(state, hyper, a);
        state.rho2[a] = sample_inv_gamma(s, r, rng);
    }
    for g in 0..state.p() {
        let (s, r) = sigma_conditional(state, hyper, g);
        state.sigma2[g] = sample_inv_gamma(s, r, rng);
    }
    let rss = gene_rss(state, data);
    let total = data.total_observations();
    for (g, v) in rss.iter().enumerate() {
        let (s, r) = phi_conditional(hyper, total, *v);
        state.phi2[g] = sample_inv_gamma(s, r, rng);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iter <= self.burn_in {
            return Err(Error::invalid("iterations must exceed burn-in"));
        }
        if self.thin == 0 {
            return Err(Error::invalid("thinning interval must be at least 1"));
        }
        Ok(())
    }

    pub fn retained(&self) -> usize {
        (self.n_iter - self.burn_in) / self.thin
    }

    /// Whether sweep `it` (1-based) is kept.
    pub fn keeps(&self, it: usize) -> bool {
        it > self.burn_in && (it - self.burn_in).is_multiple_of(self.thin)
    }
}

/// One retained state.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub iteration: usize,
    pub y: Vec<DMatrix<f64>>,
    pub a: DMatrix<f64>,
    pub z: DMatrix<bool>,
    /// `X_i^new` per subject, `p × u`, when a predictor was supplied.
    pub predictions: Option<Vec<DMatrix<f64>>>,
}

impl Draw {
    pub fn from_state(iteration: usize, state: &ModelState) -> Self {
        Draw { iteration, y: state.y.clone(), a: state.a.clone(), z: state.z.clone(), predictions: None }
    }

    pub fn loadings(&self) -> DMatrix<f64> {
        crate::model::loadings(&self.a, &self.z)
    }
}

/// A chain in progress: state plus the covariance it samples under.
pub struct Sampler<'a> {
    pub data: &'a Dataset,
    pub hyper: &'a Hyperparams,
    pub cache: SigmaCache,
    pub state: ModelState,
    pub iteration: usize,
}

impl<'a> Sampler<'a> {
    pub fn new(data: &'a Dataset, hyper: &'a Hyperparams, sigma: CovMatrix, state: ModelState) -> Result<Self> {
        data.validate()?;
        hyper.validate(data.p())?;
        state.validate(data)?;
        if sigma.k != state.k() {
            return Err(Error::dim(format!("covariance has {} factors, state has {}", sigma.k, state.k())));
        }
        if !sigma.correlation {
            return Err(Error::invalid("the sampler expects a correlation-form covariance"));
        }
        if state.k() > MAX_ENUM_K {
            return Err(Error::invalid(format!("inclusion enumeration supports k <= {MAX_ENUM_K}")));
        }
        let cache = SigmaCache::new(sigma, data)?;
        Ok(Sampler { data, hyper, cache, state, iteration: 0 })
    }

    pub fn set_sigma(&mut self, sigma: CovMatrix) -> Result<()> {
        if sigma.k != self.state.k() || !sigma.correlation {
            return Err(Error::invalid("replacement covariance must be correlation-form with matching k"));
        }
        self.cache = SigmaCache::new(sigma, self.data)?;
        Ok(())
    }

    /// One full sweep in the fixed scan order.
    pub fn sweep<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<()> {
        self.iteration += 1;
        let it = self.iteration;
        let wrap = |e: Error| Error::Sampler { iteration: it, source: Box::new(e) };
        let (data, hyper) = (self.data, self.hyper);
        let state = &mut self.state;
        update_y(state, data, &self.cache, rng).map_err(wrap)?;
        let stats = row_stats(state, data);
        for g in 0..data.p() {
            update_z_row(state, g, &stats, rng).map_err(wrap)?;
        }
        for g in 0..data.p() {
            update_a_row(state, g, &stats, rng).map_err(wrap)?;
        }
        update_mu(state, data, hyper, rng);
        update_pi(state, hyper, rng);
        update_variances(state, data, hyper, rng);
        Ok(())
    }

    /// Runs `cfg.n_iter` sweeps and returns the retained draws.
    pub fn run<R: Rng + ?Sized>(
        &mut self,
        cfg: &ChainConfig,
        predictor: Option<&Predictor>,
        rng: &mut R,
    ) -> Result<Vec<Draw>> {
        cfg.validate()?;
        let mut draws = Vec::with_capacity(cfg.retained());
        for it in 1..=cfg.n_iter {
            self.sweep(rng)?;
            if cfg.keeps(it) {
                let mut d = Draw::from_state(self.iteration, &self.state);
                if let Some(p) = predictor {
                    d.predictions = Some(predict_x(&self.state, p, rng));
                }
                draws.push(d);
            }
        }
        Ok(draws)
    }
}

pub struct ChainOutput {
    pub draws: Vec<Draw>,
    pub final_state: ModelState,
}

/// Runs one chain from `init` under a fixed correlation-form `Σ_Y`.
pub fn run_chain<R: Rng + ?Sized>(
    data: &Dataset,
    hyper: &Hyperparams,
    sigma: CovMatrix,
    init: ModelState,
    cfg: &ChainConfig,
    predictor: Option<&Predictor>,
    rng: &mut R,
) -> Result<ChainOutput> {
    let mut s = Sampler::new(data, hyper, sigma, init)?;
    let draws = s.run(cfg, predictor, rng)?;
    Ok(ChainOutput { draws, final_state: s.state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kcf::{FactorKernel, TimeGrid};
    use crate::rng::{stream, Stage};
    use approx::assert_relative_eq;

    fn unit_sigma(k: usize, times: &[f64]) -> CovMatrix {
        let params = DgpParams {
            factors: (0..k)
                .map(|_| FactorKernel { shared_amp: 0.6, shared_prec: 0.7, own_amp: 0.5, own_prec: 1.3 })
                .collect(),
            noise_sd: 0.2,
        };
        kcf::build_sigma_points(&params, times, true).unwrap()
    }

    fn state_for(data: &Dataset, k: usize) -> ModelState {
        let (n, p, q) = (data.n(), data.p(), data.q());
        ModelState {
            y: vec![DMatrix::zeros(k, q); n],
            mu: DMatrix::zeros(n, p),
            a: DMatrix::from_element(p, k, 1.0),
            z: DMatrix::from_element(p, k, true),
            pi: vec![0.3; k],
            rho2: vec![1.0; k],
            sigma2: vec![1.0; p],
            phi2: vec![1.0; p],
        }
    }

    #[test]
    fn scalar_y_posterior() {
        // precision 1 + 1, mean 2 / 2
        let grid = TimeGrid::common(vec![0.0], 1).unwrap();
        let data = Dataset::new(grid, vec![DMatrix::from_element(1, 1, 2.0)]).unwrap();
        let state = state_for(&data, 1);
        let sigma = CovMatrix {
            k: 1,
            times: vec![0.0],
            matrix: DMatrix::from_element(1, 1, 1.0),
            correlation: true,
            jitter: 0.0,
        };
        let cache = SigmaCache::new(sigma, &data).unwrap();
        let (prec, rhs) = y_obs_conditional(&state, &data, &cache, 0);
        assert_relative_eq!(prec[(0, 0)], 2.0, epsilon = 1e-15);
        assert_relative_eq!(rhs[0] / prec[(0, 0)], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn empty_loadings_give_prior_scores() {
        let times = vec![0.0, 1.0];
        let grid = TimeGrid::common(times.clone(), 1).unwrap();
        let data = Dataset::new(grid, vec![DMatrix::from_element(2, 2, 3.0)]).unwrap();
        let mut state = state_for(&data, 2);
        state.z.fill(false);
        let sigma = unit_sigma(2, &times);
        let prior = sigma.matrix.clone();
        let cache = SigmaCache::new(sigma, &data).unwrap();
        let mut rng = stream(1, Stage::Mcem, 0);
        let n = 10_000;
        let mut second = DMatrix::zeros(4, 4);
        let mut mean = DVector::zeros(4);
        for _ in 0..n {
            update_y(&mut state, &data, &cache, &mut rng).unwrap();
            let v = vec_t(&state.y[0]);
            second += &v * v.transpose();
            mean += v;
        }
        second /= n as f64;
        mean /= n as f64;
        // 3 standard errors of a mean of unit-variance draws
        assert!(mean.amax() < 3.0 / (n as f64).sqrt());
        assert!(crate::linalg::max_abs_diff(&second, &prior) < 0.06);
    }

    #[test]
    fn knot_prediction_is_exact() {
        let params = DgpParams {
            factors: vec![FactorKernel { shared_amp: 0.0, shared_prec: 1.0, own_amp: 1.0, own_prec: 1.0 }],
            noise_sd: 0.0,
        };
        let p = Predictor::new(&params, &[0.0, 1.0], &[1.0]).unwrap();
        assert!(p.conditional.cov[(0, 0)].abs() < 1e-8);
        let y = DMatrix::from_row_slice(1, 2, &[0.3, -0.7]);
        let mut rng = stream(3, Stage::Mcem, 0);
        assert!((p.sample_scores(&y, &mut rng)[(0, 0)] + 0.7).abs() < 1e-6);
    }

    #[test]
    fn bivariate_prediction_matches_closed_form() {
        let params = DgpParams {
            factors: vec![FactorKernel { shared_amp: 0.0, shared_prec: 1.0, own_amp: 1.0, own_prec: 0.5 }],
            noise_sd: 0.0,
        };
        let p = Predictor::new(&params, &[0.0], &[1.5]).unwrap();
        let rho = (-0.25f64 * 0.5 * 1.5 * 1.5).exp();
        assert_relative_eq!(p.conditional.gain[(0, 0)], rho, epsilon = 1e-12);
        assert_relative_eq!(p.conditional.cov[(0, 0)], 1.0 - rho * rho, epsilon = 1e-12);
    }

    #[test]
    fn mu_scalar_examples() {
        assert_eq!(mu_conditional(0.0, 1.0, 1.0, 1, 4.0), (2.0, 0.5));
        let (m, v) = mu_conditional(1.0, 1.0, 1.0, 4, 4.0);
        assert_relative_eq!(m, 1.0, epsilon = 1e-15);
        assert_relative_eq!(v, 0.2, epsilon = 1e-15);
        let (m, v) = mu_conditional(3.0, 2.0, 1e300, 5, 7.0);
        assert_relative_eq!(m, 3.0, epsilon = 1e-12);
        assert_relative_eq!(v, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn conjugate_parameter_examples() {
        let grid = TimeGrid::common(vec![0.0], 1).unwrap();
        let data = Dataset::new(grid, vec![DMatrix::zeros(3, 1)]).unwrap();
        let mut state = state_for(&data, 1);
        state.z = DMatrix::from_column_slice(3, 1, &[true, false, true]);
        let mut h = Hyperparams::default_for(&data);
        h.c0 = 1.0;
        h.d0 = 1.0;
        assert_eq!(pi_conditional(&state, &h, 0), (3.0, 2.0));

        let grid = TimeGrid::common(vec![0.0], 1).unwrap();
        let data2 = Dataset::new(grid, vec![DMatrix::zeros(2, 1)]).unwrap();
        let mut s2 = state_for(&data2, 1);
        s2.a = DMatrix::from_column_slice(2, 1, &[1.0, 1.0]);
        let mut h2 = Hyperparams::default_for(&data2);
        h2.c1 = 1.0;
        h2.d1 = 1.0;
        assert_eq!(rho_conditional(&s2, &h2, 0), (2.0, 2.0));
        h2.c2 = 1.0;
        h2.d2 = 1.0;
        h2.mu_g = vec![0.0, 0.0];
        s2.mu = DMatrix::from_row_slice(1, 2, &[2.0, 0.0]);
        assert_eq!(sigma_conditional(&s2, &h2, 0), (1.5, 3.0));
    }

    #[test]
    fn pi_draws_match_beta_mean() {
        let grid = TimeGrid::common(vec![0.0], 1).unwrap();
        let data = Dataset::new(grid, vec![DMatrix::zeros(100, 1)]).unwrap();
        let mut state = state_for(&data, 1);
        state.z.fill(false);
        let mut h = Hyperparams::default_for(&data);
        h.c0 = 10.0;
        h.d0 = 90.0;
        assert_eq!(pi_conditional(&state, &h, 0), (10.0, 190.0));
        let mut rng = stream(8, Stage::Mcem, 0);
        let n = 20_000;
        let mut sum = 0.0;
        for _ in 0..n {
            update_pi(&mut state, &h, &mut rng);
            sum += state.pi[0];
        }
        let (a, b): (f64, f64) = (10.0, 190.0);
        let mean = a / (a + b);
        let sd = (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt();
        assert!((sum / n as f64 - mean).abs() < 3.0 * sd / (n as f64).sqrt());
    }

    #[test]
    fn z_row_prior_domination_and_prior_only() {
        let grid = TimeGrid::common(vec![0.0], 1).unwrap();
        let data = Dataset::new(grid, vec![DMatrix::from_element(1, 1, 0.5)]).unwrap();
        let mut state = state_for(&data, 1);
        state.pi = vec![1e-12];
        let stats = row_stats(&state, &data);
        let mut rng = stream(4, Stage::Mcem, 0);
        for _ in 0..1000 {
            update_z_row(&mut state, 0, &stats, &mut rng).unwrap();
            assert!(!state.z[(0, 0)]);
        }
        // zero scores: both configurations fit equally well
        state.pi = vec![0.3];
        state.y[0].fill(0.0);
        let stats = row_stats(&state, &data);
        let n = 10_000;
        let mut ones = 0;
        for _ in 0..n {
            update_z_row(&mut state, 0, &stats, &mut rng).unwrap();
            ones += state.z[(0, 0)] as usize;
        }
        let sd = (0.3f64 * 0.7 / n as f64).sqrt();
        assert!((ones as f64 / n as f64 - 0.3).abs() < 3.0 * sd);
    }

    #[test]
    fn a_row_scalar_least_squares() {
        let grid = TimeGrid::common(vec![0.0], 1).unwrap();
        let data = Dataset::new(grid, vec![DMatrix::from_element(1, 1, 3.0)]).unwrap();
        let mut state = state_for(&data, 1);
        state.y[0][(0, 0)] = 1.0;
        state.rho2 = vec![1e300];
        let stats = row_stats(&state, &data);
        let (prec, rhs) = a_row_conditional(&state, 0, &stats);
        assert_relative_eq!(prec[(0, 0)], 1.0, epsilon = 1e-12);
        assert_relative_eq!(rhs[0] / prec[(0, 0)], 3.0, epsilon = 1e-12);
    }

    #[test]
    fn excluded_row_reverts_to_prior() {
        let grid = TimeGrid::common(vec![0.0], 1).unwrap();
        let data = Dataset::new(grid, vec![DMatrix::from_element(1, 1, 3.0)]).unwrap();
        let mut state = state_for(&data, 2);
        state.z.fill(false);
        state.rho2 = vec![4.0, 0.25];
        state.y[0].fill(1.0);
        let stats = row_stats(&state, &data);
        let mut rng = stream(5, Stage::Mcem, 0);
        let n = 10_000;
        let mut sq = [0.0; 2];
        for _ in 0..n {
            update_a_row(&mut state, 0, &stats, &mut rng).unwrap();
            sq[0] += state.a[(0, 0)].powi(2);
            sq[1] += state.a[(0, 1)].powi(2);
        }
        assert!((sq[0] / n as f64 / 4.0 - 1.0).abs() < 0.05);
        assert!((sq[1] / n as f64 / 0.25 - 1.0).abs() < 0.05);
    }

    #[test]
    fn chain_is_deterministic_and_keeps_expected_count() {
        let times = vec![0.0, 1.0, 2.0];
        let grid = TimeGrid::new(times.clone(), vec![vec![0, 1, 2], vec![0, 2]]).unwrap();
        let data = Dataset::new(
            grid,
            vec![
                DMatrix::from_fn(4, 3, |g, j| (g + j) as f64 * 0.3),
                DMatrix::from_fn(4, 2, |g, j| (g * j) as f64 * 0.2 + 1.0),
            ],
        )
        .unwrap();
        let hyper = Hyperparams::default_for(&data);
        let init = state_for(&data, 2);
        let cfg = ChainConfig { n_iter: 50, burn_in: 20, thin: 3 };
        let params = DgpParams::default_start(2, crate::kcf::ProcessModel::Dgp);
        let predictor = Predictor::new(&params, &times, &[3.0]).unwrap();
        let sigma = kcf::build_sigma_y(&params, &data.grid, true).unwrap();
        let run = |seed| {
            let mut rng = stream(seed, Stage::FinalChains, 0);
            run_chain(&data, &hyper, sigma.clone(), init.clone(), &cfg, Some(&predictor), &mut rng).unwrap()
        };
        let a = run(9);
        let b = run(9);
        assert_eq!(a.draws.len(), 10);
        assert_eq!(a.draws, b.draws);
        assert_eq!(a.final_state, b.final_state);
        assert!(a.final_state.validate(&data).is_ok());
    }

    #[test]
    fn standard_schedules_retain_expected_draws() {
        assert_eq!(ChainConfig { n_iter: 10_000, burn_in: 3000, thin: 10 }.retained(), 700);
        assert_eq!(ChainConfig { n_iter: 100_000, burn_in: 30_000, thin: 500 }.retained(), 140);
    }
}
