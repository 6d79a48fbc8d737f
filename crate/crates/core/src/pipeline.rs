//! End-to-end fit: initializer, MCEM, final chains, alignment and summaries.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{align_chains, best_transform, mean_loadings, AlignOptions, SignedPermutation};
use crate::diagnostics::{
    cell_quantiles, diagnostics_report, factor_recovery_mae_from_medians, prediction_metrics_from_quantiles,
    summarize_loadings, CellQuantiles, DiagnosticsReport, LoadingSummary, PredictionMetrics,
};
use crate::error::{Error, Result};
use crate::gibbs::{run_chain, ChainConfig, Draw, Predictor};
use crate::init::{init_theta, initialize};
use crate::kcf::{build_sigma_y, factor_correlation, DgpParams, ProcessModel};
use crate::linalg::max_abs_diff;
use crate::mcem::{run_mcem, McemConfig, McemResult};
use crate::mle::{MleOptions, MleReport};
use crate::model::{Dataset, Hyperparams, ModelState};
use crate::rng::{stream, Stage};
use crate::simulate::{GroundTruth, HeldOut};

/// Prior constants; the inclusion prior scales with the number of genes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorConfig {
    /// `c0 = c0_per_gene · p`.
    pub c0_per_gene: f64,
    pub d0_per_gene: f64,
    pub c1: f64,
    pub d1: f64,
    pub c2: f64,
    pub d2: f64,
    pub c3: f64,
    pub d3: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig { c0_per_gene: 0.1, d0_per_gene: 0.9, c1: 1e-2, d1: 1e-2, c2: 1e-2, d2: 1e-2, c3: 1e-2, d3: 1e-2 }
    }
}

impl PriorConfig {
    pub fn hyperparams(&self, data: &Dataset) -> Result<Hyperparams> {
        let p = data.p() as f64;
        let h = Hyperparams {
            c0: self.c0_per_gene * p,
            d0: self.d0_per_gene * p,
            c1: self.c1,
            d1: self.d1,
            c2: self.c2,
            d2: self.d2,
            c3: self.c3,
            d3: self.d3,
            mu_g: data.gene_grand_means(),
        };
        h.validate(data.p())?;
        Ok(h)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinalChainsConfig {
    pub chains: usize,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl Default for FinalChainsConfig {
    fn default() -> Self {
        FinalChainsConfig { chains: 5, n_iter: 10_000, burn_in: 3_000, thin: 10 }
    }
}

impl FinalChainsConfig {
    pub fn chain_config(&self) -> ChainConfig {
        ChainConfig { n_iter: self.n_iter, burn_in: self.burn_in, thin: self.thin }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub k: usize,
    pub model: ProcessModel,
    pub prior: PriorConfig,
    pub mcem: McemConfig,
    pub final_chains: FinalChainsConfig,
    pub seed: u64,
    /// Times at which expression is predicted for every subject.
    pub predict_times: Vec<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            k: 4,
            model: ProcessModel::Dgp,
            prior: PriorConfig::default(),
            mcem: McemConfig::default(),
            final_chains: FinalChainsConfig::default(),
            seed: 1,
            predict_times: Vec::new(),
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        if self.final_chains.chains == 0 {
            return Err(Error::invalid("at least one final chain is required"));
        }
        if self.predict_times.iter().any(|t| !t.is_finite()) {
            return Err(Error::invalid("prediction times must be finite"));
        }
        self.mcem.validate()?;
        self.final_chains.chain_config().validate()
    }
}

/// Everything produced by [`fit`]. Draws are in the frame of `theta`.
pub struct FitResult {
    pub config: FitConfig,
    pub hyper: Hyperparams,
    pub initial: MleReport,
    pub mcem: McemResult,
    pub theta: DgpParams,
    /// `k × k` factor correlation implied by `theta`.
    pub correlation: DMatrix<f64>,
    pub chains: Vec<Vec<Draw>>,
    pub summary: LoadingSummary,
    pub diagnostics: DiagnosticsReport,
    /// Quantiles of predicted expression at `config.predict_times`.
    pub predictions: Option<CellQuantiles>,
    /// Quantiles of factor scores on the pooled grid.
    pub scores: CellQuantiles,
}

pub fn fit(data: &Dataset, config: &FitConfig) -> Result<FitResult> {
    config.validate()?;
    data.validate()?;
    let hyper = config.prior.hyperparams(data)?;
    let (k, model, seed) = (config.k, config.model, config.seed);

    let init = initialize(data, k, &hyper).map_err(|e| e.at_stage("initializer"))?;
    let mle_opts = MleOptions { model, seed, restarts: config.mcem.optimizer_restarts, ..MleOptions::default() };
    let initial = init_theta(&init.state.y, &data.grid, &mle_opts).map_err(|e| e.at_stage("initializer"))?;
    log::info!("initial process fit: objective {:.4}", initial.objective);

    let mcem = run_mcem(data, &hyper, &config.mcem, model, init.state.clone(), &initial.params, seed)
        .map_err(|e| e.at_stage("mcem"))?;
    let theta = mcem.theta.clone();
    let reference = mcem.final_state.loadings();
    let post = sample_posterior(data, &hyper, &theta, &init.state, &reference, config)?;

    Ok(FitResult {
        config: config.clone(),
        hyper,
        initial,
        mcem,
        correlation: factor_correlation(&theta),
        theta,
        chains: post.chains,
        summary: post.summary,
        diagnostics: post.diagnostics,
        predictions: post.predictions,
        scores: post.scores,
    })
}

/// Output of the final chains under fixed process hyperparameters.
pub struct Posterior {
    pub chains: Vec<Vec<Draw>>,
    pub summary: LoadingSummary,
    pub diagnostics: DiagnosticsReport,
    pub predictions: Option<CellQuantiles>,
    pub scores: CellQuantiles,
}

/// Runs `config.final_chains` chains under `theta` from `start`, moved into
/// the frame of `reference` loadings, then aligns and summarises them. Draws
/// come back in the frame of `reference`.
pub fn sample_posterior(
    data: &Dataset,
    hyper: &Hyperparams,
    theta: &DgpParams,
    start: &ModelState,
    reference: &DMatrix<f64>,
    config: &FitConfig,
) -> Result<Posterior> {
    let seed = config.seed;
    let opts = AlignOptions { greedy_fallback: true };
    let to_frame = best_transform(&start.loadings(), reference, opts)?;
    let start = to_frame.apply_state(start);
    let sigma = build_sigma_y(theta, &data.grid, true).map_err(|e| e.at_stage("final chains"))?;
    let predictor = if config.predict_times.is_empty() {
        None
    } else {
        Some(Predictor::new(theta, &data.grid.times, &config.predict_times).map_err(|e| e.at_stage("prediction"))?)
    };
    let cc = config.final_chains.chain_config();
    let mut chains: Vec<Vec<Draw>> = (0..config.final_chains.chains)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream(seed, Stage::FinalChains, c as u64);
            run_chain(data, hyper, sigma.clone(), start.clone(), &cc, predictor.as_ref(), &mut rng).map(|o| o.draws)
        })
        .collect::<Result<_>>()
        .map_err(|e| e.at_stage("final chains"))?;

    align_chains(&mut chains, opts).map_err(|e| e.at_stage("alignment"))?;
    let back = best_transform(&mean_loadings(&chains[0]), reference, opts)?;
    if !back.is_identity() {
        for d in chains.iter_mut().flatten() {
            *d = back.apply_draw(d);
        }
    }

    let summary = summarize_loadings(&chains)?;
    let diagnostics = diagnostics_report(&chains, &summary)?;
    if !diagnostics.converged() {
        log::warn!(
            "Rhat above {}: {} prediction cells, {} loadings",
            diagnostics.cutoff,
            diagnostics.predictions_over_cutoff,
            diagnostics.loadings_over_cutoff
        );
    }
    let pooled: Vec<&Draw> = chains.iter().flatten().collect();
    let predictions = if predictor.is_some() {
        let views: Vec<&[DMatrix<f64>]> =
            pooled.iter().map(|d| d.predictions.as_deref().expect("predictor was set")).collect();
        Some(cell_quantiles(&views)?)
    } else {
        None
    };
    let score_views: Vec<&[DMatrix<f64>]> = pooled.iter().map(|d| d.y.as_slice()).collect();
    let scores = cell_quantiles(&score_views)?;
    Ok(Posterior { chains, summary, diagnostics, predictions, scores })
}

/// Re-runs the final chains for new prediction times from a saved fit:
/// `theta` and the summarised mean loadings that fix its factor frame.
pub fn predict_from_fit(
    data: &Dataset,
    theta: &DgpParams,
    mean_loadings: &DMatrix<f64>,
    config: &FitConfig,
) -> Result<Posterior> {
    config.validate()?;
    let hyper = config.prior.hyperparams(data)?;
    let init = initialize(data, config.k, &hyper).map_err(|e| e.at_stage("initializer"))?;
    sample_posterior(data, &hyper, theta, &init.state, mean_loadings, config)
}

/// Accuracy of a fit against simulated truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub prediction: Option<PredictionMetrics>,
    /// Only defined when the fitted and true factor counts agree.
    pub mae_y: Option<f64>,
    pub correlation_error: Option<f64>,
    /// Fitted correlation expressed in the truth's factor order and signs.
    pub aligned_correlation: Option<Vec<Vec<f64>>>,
    pub transform: Option<SignedPermutation>,
}

/// Truth loadings scaled to unit-variance factors, the scale the model fits.
pub fn scaled_truth_loadings(truth: &GroundTruth) -> DMatrix<f64> {
    let mut l = truth.loadings.clone();
    for (a, sd) in truth.spec.factor_sd.iter().enumerate() {
        l.column_mut(a).scale_mut(*sd);
    }
    l
}

pub fn evaluate(result: &FitResult, truth: Option<&GroundTruth>, held_out: Option<&HeldOut>) -> Result<Evaluation> {
    evaluate_parts(
        &result.summary.mean_loadings(),
        &result.correlation,
        &result.scores.median,
        result.predictions.as_ref(),
        truth,
        held_out,
    )
}

/// [`evaluate`] from saved summaries: posterior-mean loadings, the fitted
/// correlation, posterior-median scores on the pooled grid and prediction
/// quantiles, all in the same factor frame.
pub fn evaluate_parts(
    mean_loadings: &DMatrix<f64>,
    correlation: &DMatrix<f64>,
    score_medians: &[DMatrix<f64>],
    predictions: Option<&CellQuantiles>,
    truth: Option<&GroundTruth>,
    held_out: Option<&HeldOut>,
) -> Result<Evaluation> {
    let prediction = match (held_out, predictions) {
        (Some(h), Some(p)) => Some(prediction_metrics_from_quantiles(p, &h.x)?),
        _ => None,
    };
    let mut ev =
        Evaluation { prediction, mae_y: None, correlation_error: None, aligned_correlation: None, transform: None };
    let Some(truth) = truth else {
        return Ok(ev);
    };
    if truth.spec.k != mean_loadings.ncols() {
        return Ok(ev);
    }
    let t = best_transform(mean_loadings, &scaled_truth_loadings(truth), AlignOptions { greedy_fallback: true })?;
    let corr = t.apply_symmetric(correlation);
    let true_corr = DMatrix::from_fn(truth.spec.k, truth.spec.k, |a, b| truth.spec.cross_correlation[a][b]);
    let observed = score_medians.first().map_or(0, |m| m.ncols()).min(truth.spec.u1);
    let medians: Vec<DMatrix<f64>> =
        score_medians.iter().map(|m| t.apply_rows(&m.columns(0, observed).into_owned())).collect();
    ev.mae_y = Some(factor_recovery_mae_from_medians(&medians, &truth.y, Some(&truth.spec.factor_sd))?);
    ev.correlation_error = Some(max_abs_diff(&corr, &true_corr));
    ev.aligned_correlation = Some((0..corr.nrows()).map(|r| corr.row(r).iter().copied().collect()).collect());
    ev.transform = Some(t);
    Ok(ev)
}
