//! Directory-level processing: preprocess and screen every recording, then
//! fit each usable one at every requested order.
//!
//! Results are collected in input order, so the outputs do not depend on the
//! number of workers.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use udm::{FitConfig, FitResult};

use crate::error::{CliError, CliResult};
use crate::io::{format_value, read_recording, write_json, write_recording};
use crate::manifest::RunManifest;
use crate::preprocess::{preprocess, PreprocessConfig};

/// Environment variable holding the worker count; unset or 0 uses one worker
/// per core.
pub const WORKERS_ENV: &str = "UDM_WORKERS";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchConfig {
    pub preprocess: PreprocessConfig,
    pub fit: FitConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exclusion {
    pub recording: String,
    pub reasons: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitFailure {
    pub recording: String,
    pub order: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrderStats {
    pub order: usize,
    /// Recordings fitted successfully at this order.
    pub recordings: usize,
    pub mean_r_squared: Option<f64>,
    pub min_r_squared: Option<f64>,
    pub max_r_squared: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchSummary {
    /// `processed + excluded == total`.
    pub total: usize,
    pub processed: usize,
    pub excluded: usize,
    pub orders: Vec<usize>,
    pub exclusions: Vec<Exclusion>,
    pub failures: Vec<FitFailure>,
    pub order_stats: Vec<OrderStats>,
    /// Order with the highest mean R².
    pub best_order: Option<usize>,
}

/// Recording files (`*.csv`) of `dir`, sorted by path.
pub fn list_recordings(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::from(e).in_file(dir))?
        .map(|e| e.map(|e| e.path()))
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

fn worker_count() -> CliResult<usize> {
    match std::env::var(WORKERS_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("{WORKERS_ENV}=`{s}` is not a worker count"))),
        Err(_) => Ok(0),
    }
}

fn stem(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

/// Outcome of stage 1 for one file: the path of the written preprocessed
/// series, or the exclusion reasons.
type Screened = Result<PathBuf, Vec<String>>;

fn screen_one(path: &Path, config: &PreprocessConfig, dir: &Path) -> CliResult<Screened> {
    let raw = match read_recording(path) {
        Ok(raw) => raw,
        Err(e) => return Ok(Err(vec![e.message])),
    };
    let pre = match preprocess(&raw, None, config) {
        Ok(pre) => pre,
        Err(e) => return Ok(Err(vec![e.message])),
    };
    fs::create_dir_all(dir)?;
    write_json(&dir.join("report.json"), &pre.report)?;
    if !pre.report.validity.usable {
        return Ok(Err(pre.report.reasons));
    }
    let out = dir.join("preprocessed.csv");
    write_recording(&out, &pre.series)?;
    Ok(Ok(out))
}

/// Fit the preprocessed file as it was written, so that its digest matches
/// what a later `decompose --input` reads.
fn fit_one(preprocessed: &Path, config: &FitConfig, out: &Path) -> CliResult<Result<FitResult, String>> {
    let sc = read_recording(preprocessed)?;
    match udm::fit(&sc, config) {
        Ok(result) => {
            fs::create_dir_all(out)?;
            write_json(&out.join("fit.json"), &result)?;
            Ok(Ok(result))
        }
        Err(e) => Ok(Err(e.to_string())),
    }
}

pub fn run_batch(input_dir: &Path, config: &BatchConfig, orders: &[usize], out: &Path) -> CliResult<()> {
    if orders.is_empty() {
        return Err(CliError::usage("no model order given"));
    }
    for &order in orders {
        FitConfig { order, ..config.fit }.validate()?;
    }
    let files = list_recordings(input_dir)?;
    if files.is_empty() {
        return Err(CliError::usage(format!("{}: no .csv recordings", input_dir.display())));
    }
    let mut manifest = RunManifest::begin("batch", &(config, orders))?;
    for f in &files {
        manifest.add_input(f)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(worker_count()?)
        .build()
        .map_err(|e| CliError::usage(e.to_string()))?;
    let names: Vec<String> = files.iter().map(|f| stem(f)).collect();
    let rec_dir = |name: &str| out.join("recordings").join(name);

    let screened: Vec<Screened> = pool.install(|| {
        files
            .par_iter()
            .zip(&names)
            .map(|(f, name)| screen_one(f, &config.preprocess, &rec_dir(name)))
            .collect::<CliResult<_>>()
    })?;

    let tasks: Vec<(usize, usize)> = screened
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_ok())
        .flat_map(|(i, _)| orders.iter().map(move |&k| (i, k)))
        .collect();
    let fits: Vec<Result<FitResult, String>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(i, order)| {
                let path = screened[i].as_ref().expect("only usable recordings are fitted");
                let cfg = FitConfig { order, ..config.fit };
                fit_one(path, &cfg, &rec_dir(&names[i]).join(format!("order{order}")))
            })
            .collect::<CliResult<_>>()
    })?;

    let mut rows: Vec<[String; 8]> = Vec::new();
    let mut exclusions = Vec::new();
    for (name, s) in names.iter().zip(&screened) {
        if let Err(reasons) = s {
            exclusions.push(Exclusion {
                recording: name.clone(),
                reasons: reasons.clone(),
            });
            rows.push([
                name.clone(),
                "excluded".into(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                reasons.join("; "),
            ]);
        }
    }
    let mut failures = Vec::new();
    let mut r2_by_order: Vec<Vec<f64>> = vec![Vec::new(); orders.len()];
    for (&(i, order), fit) in tasks.iter().zip(&fits) {
        let slot = orders.iter().position(|&k| k == order).expect("task order is requested");
        match fit {
            Ok(f) => {
                r2_by_order[slot].push(f.r_squared);
                rows.push([
                    names[i].clone(),
                    "fitted".into(),
                    order.to_string(),
                    format_value(f.r_squared),
                    f.sna.bursts().len().to_string(),
                    format_value(f.sna.support_fraction()),
                    f.diagnostics.iterations.len().to_string(),
                    String::new(),
                ]);
            }
            Err(reason) => {
                failures.push(FitFailure {
                    recording: names[i].clone(),
                    order,
                    reason: reason.clone(),
                });
                rows.push([
                    names[i].clone(),
                    "failed".into(),
                    order.to_string(),
                    String::new(),
                    String::new(),
                    String::new(),
                    String::new(),
                    reason.clone(),
                ]);
            }
        }
    }
    rows.sort_by(|a, b| (&a[0], a[2].parse::<usize>().ok()).cmp(&(&b[0], b[2].parse::<usize>().ok())));

    let order_stats: Vec<OrderStats> = orders
        .iter()
        .zip(&r2_by_order)
        .map(|(&order, r2)| {
            let n = r2.len();
            OrderStats {
                order,
                recordings: n,
                mean_r_squared: (n > 0).then(|| r2.iter().sum::<f64>() / n as f64),
                min_r_squared: r2.iter().copied().reduce(f64::min),
                max_r_squared: r2.iter().copied().reduce(f64::max),
            }
        })
        .collect();
    let best_order = order_stats
        .iter()
        .filter_map(|s| s.mean_r_squared.map(|m| (s.order, m)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k);
    let processed = screened.iter().filter(|s| s.is_ok()).count();
    let summary = BatchSummary {
        total: files.len(),
        processed,
        excluded: files.len() - processed,
        orders: orders.to_vec(),
        exclusions,
        failures,
        order_stats,
        best_order,
    };

    fs::create_dir_all(out)?;
    let mut writer = csv::Writer::from_path(out.join("summary.csv"))?;
    writer.write_record([
        "recording",
        "status",
        "order",
        "r_squared",
        "burst_count",
        "support_fraction",
        "em_iterations",
        "reason",
    ])?;
    for r in &rows {
        writer.write_record(r)?;
    }
    writer.flush()?;
    let mut writer = csv::Writer::from_path(out.join("order_sweep.csv"))?;
    writer.write_record(["order", "recordings", "mean_r_squared"])?;
    for s in &summary.order_stats {
        writer.write_record([
            s.order.to_string(),
            s.recordings.to_string(),
            s.mean_r_squared.map_or_else(String::new, format_value),
        ])?;
    }
    writer.flush()?;
    write_json(&out.join("summary.json"), &summary)?;
    manifest.finish(out)?;
    if processed == 0 {
        return Err(CliError::quality("no usable recording"));
    }
    Ok(())
}
