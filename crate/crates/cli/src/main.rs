//! Command-line entry point: simulate, fit, predict and summarize.
//!
//! Usage:
//!   dgpfactor simulate --scenario CS --seed 7 --out runs/cs
//!   dgpfactor fit --data runs/cs/data --held-out runs/cs/held_out --out runs/cs/dgp
//!   dgpfactor predict --fit runs/cs/dgp --data runs/cs/data --times 9,10 --out runs/cs/pred
//!   dgpfactor summarize --fit runs/cs/dgp --truth runs/cs/truth.json --held-out runs/cs/held_out

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;

use dgpfactor::io::{read_dataset, read_held_out, read_json, write_dataset, write_held_out, write_json};
use dgpfactor::output::{finish_manifest, read_fit, write_fit, write_metrics, write_posterior, MetricsRow};
use dgpfactor::pipeline::{fit, predict_from_fit, FitConfig};
use dgpfactor::simulate::{simulate, split_train_test, GroundTruth, ScenarioSpec};
use dgpfactor::ProcessModel;

const DATA_DIR: &str = "data";
const HELD_OUT_DIR: &str = "held_out";
const TRUTH_FILE: &str = "truth.json";
const SPEC_FILE: &str = "spec.json";

#[derive(Parser)]
#[command(
    name = "dgpfactor",
    version,
    about = "Sparse Bayesian factor analysis with dependent Gaussian process factors"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a benchmark scenario and split it into training and held-out data.
    Simulate(SimulateArgs),
    /// Fit the model and write estimates, posterior summaries and diagnostics.
    Fit(FitArgs),
    /// Re-run the final chains of a saved fit to predict at new times.
    Predict(PredictArgs),
    /// Compute the metric table of a saved fit against truth.
    Summarize(SummarizeArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Scenario {
    #[value(name = "CS")]
    Cs,
    #[value(name = "CL")]
    Cl,
    #[value(name = "US")]
    Us,
    #[value(name = "UL")]
    Ul,
}

impl Scenario {
    fn name(self) -> &'static str {
        match self {
            Scenario::Cs => "CS",
            Scenario::Cl => "CL",
            Scenario::Us => "US",
            Scenario::Ul => "UL",
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    Dgp,
    Igp,
}

impl From<ModelArg> for ProcessModel {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Dgp => ProcessModel::Dgp,
            ModelArg::Igp => ProcessModel::Igp,
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_enum, ignore_case = true)]
    scenario: Scenario,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// JSON object whose fields override the scenario preset.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct ChainArgs {
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    chains: Option<usize>,
    /// Total sweeps per final chain.
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    burn_in: Option<usize>,
    #[arg(long)]
    thin: Option<usize>,
    /// Comma-separated prediction times.
    #[arg(long, value_delimiter = ',')]
    times: Vec<f64>,
    /// Held-out directory; its times are predicted when `--times` is absent.
    #[arg(long)]
    held_out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    k: usize,
    #[arg(long, value_enum, default_value = "dgp")]
    model: ModelArg,
    #[arg(long)]
    mcem_iterations: Option<usize>,
    #[command(flatten)]
    chain: ChainArgs,
    /// JSON object whose fields override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    /// Output directory of a previous `fit`.
    #[arg(long)]
    fit: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    chain: ChainArgs,
}

#[derive(Args)]
struct SummarizeArgs {
    #[arg(long)]
    fit: PathBuf,
    /// Ground truth written by `simulate`.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    held_out: Option<PathBuf>,
    /// Defaults to `<fit>/summary`.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Recursively overwrites fields of `base` with those present in `over`.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (key, v) in o {
                match b.get_mut(&key) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(key, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn apply_overrides<T: serde::Serialize + serde::de::DeserializeOwned>(base: &T, path: Option<&Path>) -> Result<T> {
    let Some(path) = path else {
        return Ok(serde_json::from_value(serde_json::to_value(base)?)?);
    };
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let over: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if !over.is_object() {
        bail!("{} must contain a JSON object", path.display());
    }
    let mut value = serde_json::to_value(base)?;
    merge(&mut value, over);
    serde_json::from_value(value).with_context(|| format!("applying {}", path.display()))
}

fn apply_chain_args(cfg: &mut FitConfig, args: &ChainArgs) -> Result<()> {
    cfg.seed = args.seed;
    let fc = &mut cfg.final_chains;
    if let Some(c) = args.chains {
        fc.chains = c;
    }
    if let Some(n) = args.iterations {
        fc.n_iter = n;
    }
    if let Some(b) = args.burn_in {
        fc.burn_in = b;
    }
    if let Some(t) = args.thin {
        fc.thin = t;
    }
    cfg.predict_times = if !args.times.is_empty() {
        args.times.clone()
    } else if let Some(dir) = &args.held_out {
        read_held_out(dir)?.times
    } else {
        Vec::new()
    };
    Ok(())
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let preset = ScenarioSpec::preset(args.scenario.name(), args.seed)?;
    let spec = apply_overrides(&preset, args.config.as_deref())?;
    let (data, truth) = simulate(&spec)?;
    let (train, held) = split_train_test(&data, spec.u1, spec.u2)?;
    fs::create_dir_all(&args.out)?;
    write_dataset(&args.out.join(DATA_DIR), &train)?;
    write_held_out(&args.out.join(HELD_OUT_DIR), &held, &data)?;
    write_json(&args.out.join(TRUTH_FILE), &truth)?;
    write_json(&args.out.join(SPEC_FILE), &spec)?;
    finish_manifest(&args.out, "simulate", spec.seed, &spec)?;
    println!(
        "simulated {}: n={} p={} k={} times={}+{} -> {}",
        spec.name,
        spec.n,
        spec.p,
        spec.k,
        spec.u1,
        spec.u2,
        args.out.display()
    );
    Ok(())
}

fn run_fit(args: FitArgs) -> Result<()> {
    let mut cfg = FitConfig { k: args.k, model: args.model.into(), ..FitConfig::default() };
    if let Some(m) = args.mcem_iterations {
        cfg.mcem.max_iterations = m;
    }
    apply_chain_args(&mut cfg, &args.chain)?;
    let cfg = apply_overrides(&cfg, args.config.as_deref())?;
    let data = read_dataset(&args.data)?;
    let result = fit(&data, &cfg)?;
    write_fit(&args.out, &data, &result)?;
    let d = &result.diagnostics;
    println!(
        "fit {:?} k={}: {} MCEM iterations, max Rhat predictions {} loadings {}, significant loadings per factor {:?} -> {}",
        cfg.model,
        cfg.k,
        result.mcem.trace.len(),
        fmt_opt(d.max_rhat_predictions),
        fmt_opt(d.max_rhat_loadings),
        d.significant_per_factor,
        args.out.display()
    );
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let saved = read_fit(&args.fit)?;
    let mut cfg = saved.config.clone();
    apply_chain_args(&mut cfg, &args.chain)?;
    if cfg.predict_times.is_empty() {
        bail!("no prediction times: pass --times or --held-out");
    }
    let data = read_dataset(&args.data)?;
    let post = predict_from_fit(&data, &saved.info.theta, &saved.mean_loadings(), &cfg)?;
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join(dgpfactor::output::CONFIG_FILE), &cfg)?;
    write_posterior(&args.out, &data, &post, &cfg.predict_times)?;
    finish_manifest(&args.out, "predict", cfg.seed, &cfg)?;
    println!("predicted {} times -> {}", cfg.predict_times.len(), args.out.display());
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn run_summarize(args: SummarizeArgs) -> Result<()> {
    let saved = read_fit(&args.fit)?;
    let d = &saved.diagnostics;
    println!("model {:?}, k = {}", saved.info.model, saved.info.k);
    println!("significant loadings per factor: {:?}", d.significant_per_factor);
    println!(
        "max Rhat: predictions {}, loadings {} (cutoff {})",
        fmt_opt(d.max_rhat_predictions),
        fmt_opt(d.max_rhat_loadings),
        d.cutoff
    );
    if args.truth.is_none() && args.held_out.is_none() {
        println!("no truth supplied: metrics skipped");
        return Ok(());
    }
    let truth: Option<GroundTruth> = args.truth.as_deref().map(read_json).transpose()?;
    let held = args.held_out.as_deref().map(read_held_out).transpose()?;
    if held.is_some() && saved.predictions.is_none() {
        log::warn!("fit has no predictions; prediction metrics skipped");
    }
    let ev = saved.evaluate(truth.as_ref(), held.as_ref())?;
    let row = MetricsRow::new(saved.info.model, saved.info.k, &ev);
    let out = args.out.unwrap_or_else(|| args.fit.join("summary"));
    fs::create_dir_all(&out)?;
    write_metrics(&out, &row, &ev)?;
    finish_manifest(&out, "summarize", saved.config.seed, &saved.config)?;
    println!("{:<6} {:>8} {:>8} {:>8} {:>8} {:>10}", "model", "MAE_X", "MWI_X", "PWI_X", "MAE_Y", "corr_err");
    println!(
        "{:<6} {:>8} {:>8} {:>8} {:>8} {:>10}",
        row.model,
        fmt_opt(row.mae_x),
        fmt_opt(row.mwi_x),
        fmt_opt(row.pwi_x),
        fmt_opt(row.mae_y),
        fmt_opt(row.correlation_error)
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(a) => run_simulate(a),
        Command::Fit(a) => run_fit(a),
        Command::Predict(a) => run_predict(a),
        Command::Summarize(a) => run_summarize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
