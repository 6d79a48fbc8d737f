//! Files written by a fit and the metric table derived from them.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{CellQuantiles, DiagnosticsReport};
use crate::error::{Error, Result};
use crate::io::{
    factor_labels, loading_rows, quantile_rows, quantiles_from_rows, read_json, read_labeled_matrix, read_rows,
    write_json, write_jsonl, write_labeled_matrix, write_rows, LoadingRow, Manifest,
};
use crate::kcf::{DgpParams, ProcessModel};
use crate::model::Dataset;
use crate::pipeline::{evaluate_parts, Evaluation, FitConfig, FitResult, Posterior};
use crate::simulate::{GroundTruth, HeldOut};

pub const CONFIG_FILE: &str = "config.json";
pub const FIT_FILE: &str = "fit.json";
pub const CORRELATION_FILE: &str = "correlation.csv";
pub const LOADINGS_FILE: &str = "loadings.csv";
pub const SCORES_FILE: &str = "scores.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const TRACE_FILE: &str = "mcem_trace.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";

/// Estimates and layout needed to read the tables back.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitInfo {
    pub model: ProcessModel,
    pub k: usize,
    pub theta: DgpParams,
    pub initial_theta: DgpParams,
    pub mcem_iterations: usize,
    pub hit_iteration_cap: bool,
    pub subjects: Vec<String>,
    pub genes: Vec<String>,
    pub pooled_times: Vec<f64>,
    pub predict_times: Vec<f64>,
}

/// Everything [`read_fit`] recovers from an output directory.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedFit {
    pub config: FitConfig,
    pub info: FitInfo,
    pub correlation: DMatrix<f64>,
    pub loadings: Vec<LoadingRow>,
    pub scores: CellQuantiles,
    pub predictions: Option<CellQuantiles>,
    pub diagnostics: DiagnosticsReport,
}

impl SavedFit {
    /// `p × k` posterior-mean loadings.
    pub fn mean_loadings(&self) -> DMatrix<f64> {
        let p = self.info.genes.len();
        let mut m = DMatrix::zeros(p, self.info.k);
        for (i, row) in self.loadings.iter().enumerate() {
            m[(i / self.info.k, row.factor - 1)] = row.mean;
        }
        m
    }

    pub fn evaluate(&self, truth: Option<&GroundTruth>, held_out: Option<&HeldOut>) -> Result<Evaluation> {
        evaluate_parts(
            &self.mean_loadings(),
            &self.correlation,
            &self.scores.median,
            self.predictions.as_ref(),
            truth,
            held_out,
        )
    }
}

fn labels(ids: &[String], n: usize, prefix: &str) -> Vec<String> {
    if ids.len() == n {
        ids.to_vec()
    } else {
        (1..=n).map(|i| format!("{prefix}{i}")).collect()
    }
}

/// Writes the posterior tables shared by `fit` and `predict`.
pub fn write_posterior(dir: &Path, data: &Dataset, post: &Posterior, predict_times: &[f64]) -> Result<()> {
    let k = post.summary.k;
    let subjects = labels(&data.subject_ids, data.n(), "subject");
    let genes = labels(&data.gene_ids, data.p(), "gene");
    write_rows(&dir.join(LOADINGS_FILE), &loading_rows(&post.summary, &genes))?;
    write_rows(&dir.join(SCORES_FILE), &quantile_rows(&post.scores, &subjects, &factor_labels(k), &data.grid.times)?)?;
    if let Some(p) = &post.predictions {
        write_rows(&dir.join(PREDICTIONS_FILE), &quantile_rows(p, &subjects, &genes, predict_times)?)?;
    }
    write_json(&dir.join(DIAGNOSTICS_FILE), &post.diagnostics)
}

/// Writes every fit output plus a manifest into `dir`.
pub fn write_fit(dir: &Path, data: &Dataset, result: &FitResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    let cfg = &result.config;
    write_json(&dir.join(CONFIG_FILE), cfg)?;
    let info = FitInfo {
        model: cfg.model,
        k: cfg.k,
        theta: result.theta.clone(),
        initial_theta: result.initial.params.clone(),
        mcem_iterations: result.mcem.trace.len(),
        hit_iteration_cap: result.mcem.hit_iteration_cap,
        subjects: labels(&data.subject_ids, data.n(), "subject"),
        genes: labels(&data.gene_ids, data.p(), "gene"),
        pooled_times: data.grid.times.clone(),
        predict_times: cfg.predict_times.clone(),
    };
    write_json(&dir.join(FIT_FILE), &info)?;
    write_labeled_matrix(&dir.join(CORRELATION_FILE), &factor_labels(cfg.k), &result.correlation)?;
    write_jsonl(&dir.join(TRACE_FILE), &result.mcem.trace)?;
    let post = Posterior {
        chains: Vec::new(),
        summary: result.summary.clone(),
        diagnostics: result.diagnostics.clone(),
        predictions: result.predictions.clone(),
        scores: result.scores.clone(),
    };
    write_posterior(dir, data, &post, &cfg.predict_times)?;
    finish_manifest(dir, "fit", cfg.seed, cfg)
}

/// Hashes everything in `dir` into its manifest.
pub fn finish_manifest<T: Serialize>(dir: &Path, command: &str, seed: u64, config: &T) -> Result<()> {
    let mut m = Manifest::new(command, seed, config)?;
    m.record_outputs(dir)?;
    m.write(dir)
}

pub fn read_fit(dir: &Path) -> Result<SavedFit> {
    let config: FitConfig = read_json(&dir.join(CONFIG_FILE))?;
    let info: FitInfo = read_json(&dir.join(FIT_FILE))?;
    let (_, correlation) = read_labeled_matrix(&dir.join(CORRELATION_FILE))?;
    let loadings: Vec<LoadingRow> = read_rows(&dir.join(LOADINGS_FILE))?;
    let (n, p, k) = (info.subjects.len(), info.genes.len(), info.k);
    if loadings.len() != p * k || correlation.nrows() != k {
        return Err(Error::Parse { what: dir.display().to_string(), detail: "tables do not match fit.json".into() });
    }
    let scores = quantiles_from_rows(&read_rows(&dir.join(SCORES_FILE))?, n, k, info.pooled_times.len())?;
    let pred_path = dir.join(PREDICTIONS_FILE);
    let predictions = if pred_path.exists() {
        Some(quantiles_from_rows(&read_rows(&pred_path)?, n, p, info.predict_times.len())?)
    } else {
        None
    };
    let diagnostics = read_json(&dir.join(DIAGNOSTICS_FILE))?;
    Ok(SavedFit { config, info, correlation, loadings, scores, predictions, diagnostics })
}

/// One line of the metric table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub k: usize,
    pub mae_x: Option<f64>,
    pub mwi_x: Option<f64>,
    pub pwi_x: Option<f64>,
    pub mae_y: Option<f64>,
    pub correlation_error: Option<f64>,
}

impl MetricsRow {
    pub fn new(model: ProcessModel, k: usize, ev: &Evaluation) -> Self {
        MetricsRow {
            model: format!("{model:?}").to_uppercase(),
            k,
            mae_x: ev.prediction.map(|m| m.mae),
            mwi_x: ev.prediction.map(|m| m.mwi),
            pwi_x: ev.prediction.map(|m| m.pwi),
            mae_y: ev.mae_y,
            correlation_error: ev.correlation_error,
        }
    }
}

pub fn write_metrics(dir: &Path, row: &MetricsRow, ev: &Evaluation) -> Result<()> {
    write_rows(&dir.join(METRICS_CSV), std::slice::from_ref(row))?;
    write_json(&dir.join(METRICS_JSON), ev)
}
