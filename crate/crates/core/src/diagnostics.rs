//! Convergence diagnostics, posterior summaries and evaluation metrics.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gibbs::Draw;

/// Rhat above this flags a variable as not converged.
pub const RHAT_CUTOFF: f64 = 1.2;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rhat {
    pub value: f64,
    /// Set when every chain had zero variance; `value` is then 1.
    pub degenerate: bool,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn sample_var(v: &[f64]) -> f64 {
    let m = mean(v);
    v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
}

/// Potential scale reduction factor, `sqrt(((n-1)/n W + B/n) / W)`.
/// With `split`, each chain is halved first.
pub fn rhat(chains: &[&[f64]], split: bool) -> Result<Rhat> {
    if chains.len() < 2 && !split {
        return Err(Error::invalid("Rhat needs at least two chains"));
    }
    let n0 = chains.first().map(|c| c.len()).unwrap_or(0);
    if chains.iter().any(|c| c.len() != n0) {
        return Err(Error::invalid("chains must have equal length"));
    }
    if n0 < 4 {
        return Err(Error::invalid("Rhat needs chains of length at least 4"));
    }
    let pieces: Vec<&[f64]> = if split {
        let h = n0 / 2;
        chains.iter().flat_map(|c| [&c[..h], &c[n0 - h..]]).collect()
    } else {
        chains.to_vec()
    };
    let n = pieces[0].len() as f64;
    let w = mean(&pieces.iter().map(|c| sample_var(c)).collect::<Vec<_>>());
    let means: Vec<f64> = pieces.iter().map(|c| mean(c)).collect();
    let b_over_n = sample_var(&means);
    if w <= 0.0 {
        return Ok(Rhat { value: 1.0, degenerate: true });
    }
    let var_plus = (n - 1.0) / n * w + b_over_n;
    Ok(Rhat { value: (var_plus / w).sqrt(), degenerate: false })
}

/// Empirical quantile with linear interpolation between order statistics
/// (`h = (n-1) p`). `sorted` must be ascending.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of an empty sample");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

/// Median and central 95% interval.
pub fn summary3(values: &[f64]) -> (f64, f64, f64) {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    (quantile_sorted(&v, 0.025), quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.975))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadingEntry {
    pub gene: usize,
    pub factor: usize,
    /// Proportion of draws with `Z_ga = 1`, per chain.
    pub inclusion: Vec<f64>,
    /// Set when exclusion exceeds one half in every chain.
    pub zeroed: bool,
    pub mean: f64,
    pub median: f64,
    pub lower: f64,
    pub upper: f64,
    pub rhat: Option<Rhat>,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoadingSummary {
    pub p: usize,
    pub k: usize,
    /// Gene-major: entry `g * k + a`.
    pub entries: Vec<LoadingEntry>,
}

impl LoadingSummary {
    pub fn entry(&self, g: usize, a: usize) -> &LoadingEntry {
        &self.entries[g * self.k + a]
    }

    /// Summarised loading matrix (medians, zero where excluded).
    pub fn point_estimate(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.k, |g, a| self.entry(g, a).median)
    }

    pub fn mean_loadings(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.p, self.k, |g, a| self.entry(g, a).mean)
    }

    pub fn significant_per_factor(&self) -> Vec<usize> {
        (0..self.k).map(|a| (0..self.p).filter(|&g| self.entry(g, a).significant).count()).collect()
    }

    pub fn max_rhat(&self) -> Option<f64> {
        self.entries
            .iter()
            .filter_map(|e| e.rhat.filter(|r| !r.degenerate).map(|r| r.value))
            .fold(None, |m, v| Some(m.map_or(v, |m: f64| m.max(v))))
    }
}

/// Per-loading summaries over aligned chains. A loading is summarised as 0
/// when its exclusion proportion exceeds one half in every chain; otherwise
/// its coefficient draws give the median, interval and Rhat, and it is
/// significant when the interval excludes 0.
pub fn summarize_loadings(chains: &[Vec<Draw>]) -> Result<LoadingSummary> {
    if chains.is_empty() || chains.iter().any(|c| c.is_empty()) {
        return Err(Error::invalid("every chain needs at least one draw"));
    }
    let (p, k) = chains[0][0].a.shape();
    let entries = (0..p * k)
        .into_par_iter()
        .map(|idx| {
            let (g, a) = (idx / k, idx % k);
            let inclusion: Vec<f64> =
                chains.iter().map(|c| c.iter().filter(|d| d.z[(g, a)]).count() as f64 / c.len() as f64).collect();
            let zeroed = inclusion.iter().all(|f| 1.0 - f > 0.5);
            let seqs: Vec<Vec<f64>> = chains.iter().map(|c| c.iter().map(|d| d.a[(g, a)]).collect()).collect();
            let pooled_l: Vec<f64> = chains
                .iter()
                .flat_map(|c| c.iter().map(move |d| if d.z[(g, a)] { d.a[(g, a)] } else { 0.0 }))
                .collect();
            let mean_l = mean(&pooled_l);
            if zeroed {
                return LoadingEntry {
                    gene: g,
                    factor: a,
                    inclusion,
                    zeroed,
                    mean: mean_l,
                    median: 0.0,
                    lower: 0.0,
                    upper: 0.0,
                    rhat: None,
                    significant: false,
                };
            }
            let pooled: Vec<f64> = seqs.iter().flatten().copied().collect();
            let (lower, median, upper) = summary3(&pooled);
            let refs: Vec<&[f64]> = seqs.iter().map(Vec::as_slice).collect();
            let rhat = rhat(&refs, false).ok();
            LoadingEntry {
                gene: g,
                factor: a,
                inclusion,
                zeroed,
                mean: mean_l,
                median,
                lower,
                upper,
                rhat,
                significant: lower > 0.0 || upper < 0.0,
            }
        })
        .collect();
    Ok(LoadingSummary { p, k, entries })
}

/// Per-subject `p × u` matrices of the 2.5%, 50% and 97.5% quantiles.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellQuantiles {
    pub lower: Vec<DMatrix<f64>>,
    pub median: Vec<DMatrix<f64>>,
    pub upper: Vec<DMatrix<f64>>,
}

/// Quantiles of matrix-valued draws; `draws[r][i]` is subject `i` in draw `r`.
pub fn cell_quantiles(draws: &[&[DMatrix<f64>]]) -> Result<CellQuantiles> {
    if draws.is_empty() {
        return Err(Error::invalid("no draws to summarise"));
    }
    let n = draws[0].len();
    let per_subject: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (rows, cols) = draws[0][i].shape();
            let mut lo = DMatrix::zeros(rows, cols);
            let mut me = DMatrix::zeros(rows, cols);
            let mut hi = DMatrix::zeros(rows, cols);
            let mut buf = Vec::with_capacity(draws.len());
            for r in 0..rows {
                for c in 0..cols {
                    buf.clear();
                    buf.extend(draws.iter().map(|d| d[i][(r, c)]));
                    let (l, m, h) = summary3(&buf);
                    lo[(r, c)] = l;
                    me[(r, c)] = m;
                    hi[(r, c)] = h;
                }
            }
            (lo, me, hi)
        })
        .collect();
    let mut q = CellQuantiles { lower: vec![], median: vec![], upper: vec![] };
    for (l, m, h) in per_subject {
        q.lower.push(l);
        q.median.push(m);
        q.upper.push(h);
    }
    Ok(q)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionMetrics {
    pub mae: f64,
    pub mwi: f64,
    pub pwi: f64,
}

/// Mean absolute error of medians, mean 95% interval width, and the
/// proportion of held-out values inside their interval (bounds inclusive).
pub fn prediction_metrics_from_quantiles(q: &CellQuantiles, truth: &[DMatrix<f64>]) -> Result<PredictionMetrics> {
    if truth.len() != q.median.len() {
        return Err(Error::dim("truth and predictions cover different subjects"));
    }
    let (mut ae, mut wi, mut inside, mut count) = (0.0, 0.0, 0usize, 0usize);
    for (i, ti) in truth.iter().enumerate() {
        if ti.shape() != q.median[i].shape() {
            return Err(Error::dim(format!("subject {i}: truth and prediction shapes differ")));
        }
        for (idx, t) in ti.iter().enumerate() {
            let (lo, me, hi) = (q.lower[i][idx], q.median[i][idx], q.upper[i][idx]);
            ae += (me - t).abs();
            wi += hi - lo;
            inside += usize::from(lo <= *t && *t <= hi);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no held-out cells"));
    }
    let c = count as f64;
    Ok(PredictionMetrics { mae: ae / c, mwi: wi / c, pwi: inside as f64 / c })
}

pub fn prediction_metrics(draws: &[&[DMatrix<f64>]], truth: &[DMatrix<f64>]) -> Result<PredictionMetrics> {
    prediction_metrics_from_quantiles(&cell_quantiles(draws)?, truth)
}

/// Mean absolute difference between posterior-median scores and the truth
/// over the first `medians[i].ncols()` times. With `scale`, truth row `a` is
/// divided by `scale[a]` first.
pub fn factor_recovery_mae_from_medians(
    medians: &[DMatrix<f64>],
    truth: &[DMatrix<f64>],
    scale: Option<&[f64]>,
) -> Result<f64> {
    if medians.len() != truth.len() {
        return Err(Error::dim("truth and estimates cover different subjects"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (m, t) in medians.iter().zip(truth) {
        if m.nrows() != t.nrows() || m.ncols() > t.ncols() {
            return Err(Error::dim("score matrices have incompatible shapes"));
        }
        for a in 0..m.nrows() {
            let s = scale.map_or(1.0, |s| s[a]);
            for j in 0..m.ncols() {
                total += (m[(a, j)] - t[(a, j)] / s).abs();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid("no factor scores to compare"));
    }
    Ok(total / count as f64)
}

pub fn factor_recovery_mae(draws: &[&[DMatrix<f64>]], truth: &[DMatrix<f64>], scale: Option<&[f64]>) -> Result<f64> {
    let medians = cell_quantiles(draws)?.median;
    factor_recovery_mae_from_medians(&medians, truth, scale)
}

/// Largest Rhat over every cell of matrix-valued draws, per chain:
/// `chains[c][r][i]` is subject `i` of draw `r` in chain `c`.
pub fn max_cell_rhat(chains: &[Vec<&[DMatrix<f64>]>]) -> Result<(f64, usize)> {
    if chains.len() < 2 {
        return Err(Error::invalid("Rhat needs at least two chains"));
    }
    let n = chains[0][0].len();
    let results: Vec<(f64, usize)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (rows, cols) = chains[0][0][i].shape();
            let mut worst: f64 = 0.0;
            let mut over = 0;
            for r in 0..rows {
                for c in 0..cols {
                    let seqs: Vec<Vec<f64>> =
                        chains.iter().map(|ch| ch.iter().map(|d| d[i][(r, c)]).collect()).collect();
                    let refs: Vec<&[f64]> = seqs.iter().map(Vec::as_slice).collect();
                    if let Ok(rh) = rhat(&refs, false) {
                        if !rh.degenerate {
                            worst = worst.max(rh.value);
                            over += usize::from(rh.value > RHAT_CUTOFF);
                        }
                    }
                }
            }
            (worst, over)
        })
        .collect();
    Ok(results.into_iter().fold((0.0, 0), |(w, o), (a, b)| (w.max(a), o + b)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub chains: usize,
    pub draws_per_chain: usize,
    pub cutoff: f64,
    pub max_rhat_predictions: Option<f64>,
    pub predictions_over_cutoff: usize,
    pub max_rhat_loadings: Option<f64>,
    pub loadings_over_cutoff: usize,
    pub retained_loadings: usize,
    pub significant_per_factor: Vec<usize>,
}

impl DiagnosticsReport {
    pub fn converged(&self) -> bool {
        self.max_rhat_predictions.is_none_or(|v| v <= self.cutoff)
            && self.max_rhat_loadings.is_none_or(|v| v <= self.cutoff)
    }
}

pub fn diagnostics_report(chains: &[Vec<Draw>], summary: &LoadingSummary) -> Result<DiagnosticsReport> {
    let (max_rhat_predictions, predictions_over_cutoff) =
        if chains.len() >= 2 && chains.iter().all(|c| c.iter().all(|d| d.predictions.is_some())) {
            let views: Vec<Vec<&[DMatrix<f64>]>> =
                chains.iter().map(|c| c.iter().map(|d| d.predictions.as_deref().expect("checked")).collect()).collect();
            let (m, o) = max_cell_rhat(&views)?;
            (Some(m), o)
        } else {
            (None, 0)
        };
    let loadings_over_cutoff =
        summary.entries.iter().filter(|e| e.rhat.is_some_and(|r| !r.degenerate && r.value > RHAT_CUTOFF)).count();
    Ok(DiagnosticsReport {
        chains: chains.len(),
        draws_per_chain: chains.first().map_or(0, Vec::len),
        cutoff: RHAT_CUTOFF,
        max_rhat_predictions,
        predictions_over_cutoff,
        max_rhat_loadings: summary.max_rhat(),
        loadings_over_cutoff,
        retained_loadings: summary.entries.iter().filter(|e| !e.zeroed).count(),
        significant_per_factor: summary.significant_per_factor(),
    })
}
