use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use udm::decompose::{three_component, DecompositionSummary};
use udm::lti::{self, ModelRecord};
use udm::stats::{arousal_table, sparsity_metrics, wilcoxon_signed_rank, SparsityMetrics, WilcoxonResult};
use udm::synth::{self, SynthSpec};
use udm::pipeline::AlphaPolicy;
use udm::{FitConfig, FitResult};

use crate::batch::{run_batch, BatchConfig};
use crate::error::{CliError, CliResult};
use crate::io::{format_time, format_value, read_events, read_json, read_recording, write_columns, write_json, write_recording, write_sna};
use crate::manifest::RunManifest;
use crate::preprocess::{preprocess, PreprocessConfig};

#[derive(Debug, Parser)]
#[command(name = "udm", version, about = "Unified dynamic model of skin conductance")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Filter, decimate, optionally trim to events, and screen a recording.
    Preprocess(PreprocessArgs),
    /// Fit the model and SNA to a preprocessed recording.
    Fit(FitArgs),
    /// Split a fitted recording into free, short-term and long-term parts.
    Decompose(DecomposeArgs),
    /// Arousal scores, condition test and sparsity metrics from fits.
    Eval(EvalArgs),
    /// Generate a synthetic recording and its ground truth.
    Simulate(SimulateArgs),
    /// Preprocess, screen and fit every recording in a directory.
    Batch(BatchArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub events: Option<PathBuf>,
    /// JSON preprocessing configuration; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub input: PathBuf,
    /// JSON fit configuration; omitted fields take defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured model order.
    #[arg(long)]
    pub order: Option<usize>,
    /// L1 weight: `auto` keeps the configured policy, `grid` searches the
    /// default grid, a number fixes the weight.
    #[arg(long)]
    pub alpha: Option<AlphaArg>,
    /// Event schedule; adds per-event arousal scores to the outputs.
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlphaArg {
    Auto,
    Grid,
    Fixed(f64),
}

impl std::str::FromStr for AlphaArg {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "auto" => Ok(AlphaArg::Auto),
            "grid" => Ok(AlphaArg::Grid),
            _ => match s.parse::<f64>() {
                Ok(v) if v >= 0.0 && v.is_finite() => Ok(AlphaArg::Fixed(v)),
                _ => Err(format!("`{s}` is not `auto`, `grid` or a nonnegative number")),
            },
        }
    }
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub fit: PathBuf,
    /// The recording the fit was made on.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Fit result, one per recording; pairs with `--events` by position.
    #[arg(long = "fit", required = true)]
    pub fits: Vec<PathBuf>,
    #[arg(long = "events", required = true)]
    pub events: Vec<PathBuf>,
    /// Condition expected to score higher; defaults to the first label seen.
    #[arg(long)]
    pub condition_a: Option<String>,
    /// Comparison condition; defaults to the second label seen.
    #[arg(long)]
    pub condition_b: Option<String>,
    /// Window start after each onset, seconds.
    #[arg(long, default_value_t = udm::stats::DEFAULT_WINDOW.0)]
    pub window_start: f64,
    /// Window end after each onset, seconds.
    #[arg(long, default_value_t = udm::stats::DEFAULT_WINDOW.1)]
    pub window_end: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// JSON description of the recording to generate.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BatchArgs {
    /// Directory of recording CSV files.
    #[arg(long)]
    pub input_dir: PathBuf,
    /// JSON with optional `preprocess` and `fit` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model orders to fit, comma separated; defaults to the configured order.
    #[arg(long, value_delimiter = ',')]
    pub orders: Vec<usize>,
    /// Shorthand for `--orders 2,3,4,5,6`.
    #[arg(long, conflicts_with = "orders")]
    pub sweep: bool,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Preprocess(a) => cmd_preprocess(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Decompose(a) => cmd_decompose(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Batch(a) => cmd_batch(&a),
    }
}

fn load_config<T: Default + serde::de::DeserializeOwned>(path: Option<&Path>) -> CliResult<T> {
    path.map_or_else(|| Ok(T::default()), read_json)
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::from(e).in_file(dir))
}

pub fn cmd_preprocess(args: &PreprocessArgs) -> CliResult<()> {
    let config: PreprocessConfig = load_config(args.config.as_deref())?;
    let mut manifest = RunManifest::begin("preprocess", &config)?;
    let raw = read_recording(&args.input)?;
    manifest.add_input(&args.input)?;
    let events = match &args.events {
        Some(p) => {
            manifest.add_input(p)?;
            Some(read_events(p)?)
        }
        None => None,
    };
    let out = preprocess(&raw, events.as_ref(), &config)?;
    create_out(&args.out)?;
    write_recording(&args.out.join("preprocessed.csv"), &out.series)?;
    write_json(&args.out.join("report.json"), &out.report)?;
    manifest.finish(&args.out)?;
    if out.report.validity.usable {
        Ok(())
    } else {
        Err(CliError::quality(format!("recording unusable: {}", out.report.reasons.join("; "))))
    }
}

pub fn cmd_fit(args: &FitArgs) -> CliResult<()> {
    let mut config: FitConfig = load_config(args.config.as_deref())?;
    if let Some(order) = args.order {
        config.order = order;
    }
    match args.alpha {
        Some(AlphaArg::Grid) => config.alpha = AlphaPolicy::default_grid(),
        Some(AlphaArg::Fixed(value)) => config.alpha = AlphaPolicy::Fixed { value },
        Some(AlphaArg::Auto) | None => {}
    }
    let mut manifest = RunManifest::begin("fit", &config)?;
    let sc = read_recording(&args.input)?;
    manifest.add_input(&args.input)?;
    let events = match &args.events {
        Some(p) => {
            manifest.add_input(p)?;
            Some(read_events(p)?)
        }
        None => None,
    };
    let result = udm::fit(&sc, &config)?;
    create_out(&args.out)?;
    write_json(&args.out.join("fit.json"), &result)?;
    write_sna(&args.out.join("sna.csv"), &result.sna)?;
    let free = lti::free_response(&result.model, &result.init, sc.len())?;
    let forced = lti::forced_response(&result.model, &result.sna.to_series()?)?;
    let fitted = result.reconstruction()?;
    write_columns(
        &args.out.join("reconstruction.csv"),
        &["time_s", "sc", "fitted", "free", "forced"],
        sc.start_time(),
        sc.sample_interval(),
        &[sc.samples(), fitted.samples(), free.samples(), forced.samples()],
    )?;
    if let Some(events) = events {
        let table = arousal_table(&result.sna, &events, udm::stats::DEFAULT_WINDOW)?;
        let mut writer = csv::Writer::from_path(args.out.join("arousal.csv"))?;
        writer.write_record(["onset_s", "label", "score", "truncated"])?;
        for r in &table.rows {
            writer.write_record([format_time(r.onset), r.label.clone(), format_value(r.score), r.truncated.to_string()])?;
        }
        writer.flush()?;
    }
    manifest.finish(&args.out)?;
    Ok(())
}

/// One subsystem of a decomposition report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentRecord {
    pub label: String,
    pub gain: f64,
    pub pole_real: f64,
    pub pole_imag: f64,
    pub time_constant: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionReport {
    pub summary: DecompositionSummary,
    pub subsystems: Vec<ComponentRecord>,
    pub r_squared: f64,
}

pub fn cmd_decompose(args: &DecomposeArgs) -> CliResult<()> {
    let mut manifest = RunManifest::begin("decompose", &serde_json::Value::Null)?;
    let fit: FitResult = read_json(&args.fit)?;
    manifest.add_input(&args.fit)?;
    let sc = read_recording(&args.input)?;
    manifest.add_input(&args.input)?;
    let r_squared = fit.verify(&sc).map_err(|e| CliError::from(e).in_file(&args.input))?;
    let d = three_component(&fit)?;
    create_out(&args.out)?;
    write_columns(
        &args.out.join("components.csv"),
        &["time_s", "sc", "free", "short_term", "long_term"],
        sc.start_time(),
        sc.sample_interval(),
        &[sc.samples(), d.free.samples(), d.short_term.samples(), d.long_term.samples()],
    )?;
    let dt = fit.model.sample_interval();
    let subsystems = d
        .per_subsystem
        .iter()
        .map(|s| ComponentRecord {
            label: s.label.clone(),
            gain: s.subsystem.gain(),
            pole_real: s.subsystem.pole().re,
            pole_imag: s.subsystem.pole().im,
            time_constant: s.subsystem.time_constant(dt),
        })
        .collect();
    write_json(
        &args.out.join("decomposition.json"),
        &DecompositionReport {
            summary: d.summary(),
            subsystems,
            r_squared,
        },
    )?;
    manifest.finish(&args.out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionTest {
    pub condition_a: String,
    pub condition_b: String,
    pub window: (f64, f64),
    /// Per-recording mean scores `(a, b)`.
    pub pairs: Vec<(f64, f64)>,
    /// One-sided test of `a > b`.
    pub result: WilcoxonResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingSparsity {
    pub recording: String,
    pub metrics: SparsityMetrics,
}

pub fn cmd_eval(args: &EvalArgs) -> CliResult<()> {
    if args.fits.len() != args.events.len() {
        return Err(CliError::usage(format!(
            "{} --fit files but {} --events files",
            args.fits.len(),
            args.events.len()
        )));
    }
    let window = (args.window_start, args.window_end);
    let mut manifest = RunManifest::begin("eval", &window)?;
    let mut rows: Vec<Vec<String>> = Vec::new();
    let mut tables = Vec::new();
    let mut sparsity = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for (fit_path, events_path) in args.fits.iter().zip(&args.events) {
        let fit: FitResult = read_json(fit_path)?;
        manifest.add_input(fit_path)?;
        let events = read_events(events_path)?;
        manifest.add_input(events_path)?;
        let table = arousal_table(&fit.sna, &events, window)?;
        let name = fit_path.display().to_string();
        for r in &table.rows {
            if !labels.contains(&r.label) {
                labels.push(r.label.clone());
            }
            rows.push(vec![
                name.clone(),
                format_time(r.onset),
                r.label.clone(),
                format_value(r.score),
                r.truncated.to_string(),
            ]);
        }
        sparsity.push(RecordingSparsity {
            recording: name,
            metrics: sparsity_metrics(&fit.sna),
        });
        tables.push(table);
    }
    let pick = |given: &Option<String>, k: usize| {
        given
            .clone()
            .or_else(|| labels.get(k).cloned())
            .ok_or_else(|| CliError::usage("two condition labels are needed"))
    };
    let (a, b) = (pick(&args.condition_a, 0)?, pick(&args.condition_b, 1)?);
    let pairs = tables
        .iter()
        .zip(&args.fits)
        .map(|(t, p)| match (t.condition_means.get(&a), t.condition_means.get(&b)) {
            (Some(x), Some(y)) => Ok((*x, *y)),
            _ => Err(CliError::usage(format!("{}: missing condition `{a}` or `{b}`", p.display()))),
        })
        .collect::<CliResult<Vec<_>>>()?;
    let result = wilcoxon_signed_rank(&pairs)?;

    create_out(&args.out)?;
    let mut writer = csv::Writer::from_path(args.out.join("arousal.csv"))?;
    writer.write_record(["recording", "onset_s", "label", "score", "truncated"])?;
    for r in &rows {
        writer.write_record(r)?;
    }
    writer.flush()?;
    write_json(
        &args.out.join("wilcoxon.json"),
        &ConditionTest {
            condition_a: a,
            condition_b: b,
            window,
            pairs,
            result,
        },
    )?;
    write_json(&args.out.join("sparsity.json"), &sparsity)?;
    manifest.finish(&args.out)?;
    Ok(())
}

/// Ground truth written next to a synthetic recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthRecord {
    pub spec: SynthSpec,
    pub model: ModelRecord,
    /// Time of the first nonzero sample of each burst, seconds.
    pub burst_onsets_s: Vec<f64>,
    pub components: Option<DecompositionSummary>,
}

pub fn cmd_simulate(args: &SimulateArgs) -> CliResult<()> {
    let spec: SynthSpec = read_json(&args.spec)?;
    let mut manifest = RunManifest::begin("simulate", &spec)?;
    manifest.add_input(&args.spec)?;
    let (sc, truth) = synth::generate(&spec)?;
    create_out(&args.out)?;
    write_recording(&args.out.join("recording.csv"), &sc)?;
    write_sna(&args.out.join("sna.csv"), &truth.sna)?;
    write_columns(
        &args.out.join("truth.csv"),
        &["time_s", "clean", "free", "forced"],
        sc.start_time(),
        sc.sample_interval(),
        &[truth.clean.samples(), truth.free.samples(), truth.forced.samples()],
    )?;
    write_json(
        &args.out.join("truth.json"),
        &TruthRecord {
            model: ModelRecord::new(&truth.model, &truth.init),
            burst_onsets_s: truth.burst_onsets.iter().map(|&i| sc.time_at(i)).collect(),
            components: truth.components.as_ref().map(|d| d.summary()),
            spec,
        },
    )?;
    manifest.finish(&args.out)?;
    Ok(())
}

pub fn cmd_batch(args: &BatchArgs) -> CliResult<()> {
    let config: BatchConfig = load_config(args.config.as_deref())?;
    let orders = if args.sweep {
        (2..=6).collect()
    } else if args.orders.is_empty() {
        vec![config.fit.order]
    } else {
        args.orders.clone()
    };
    run_batch(&args.input_dir, &config, &orders, &args.out)
}
