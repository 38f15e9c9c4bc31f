//! Executing a configuration into a self-describing run directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::exp::config::ExperimentConfig;
use crate::fedsim::{run_experiment, ExperimentOutcome, RoundReport};

pub const METRICS_HEADER: &str = "round,scope,split,accuracy,l_bik_t,l_bik_s,uploaded_floats,full_floats,wall_ms";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.ini";

/// One line of `metrics.csv`. `scope` is a client id or `mean`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    pub scope: String,
    pub split: String,
    pub accuracy: f64,
    pub l_bik_t: Option<f64>,
    pub l_bik_s: Option<f64>,
    pub uploaded_floats: usize,
    pub full_floats: usize,
    pub wall_ms: f64,
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (n, s) = values.fold((0usize, 0.0), |(n, s), v| (n + 1, s + v));
    (n > 0).then(|| s / n as f64)
}

/// Per-client test rows followed by the round's `mean` row.
pub fn rows_for_round(r: &RoundReport) -> Vec<MetricsRow> {
    let mut rows: Vec<MetricsRow> = r
        .clients
        .iter()
        .filter_map(|c| {
            Some(MetricsRow {
                round: r.round,
                scope: c.client_id.to_string(),
                split: "test".into(),
                accuracy: c.test_accuracy?,
                l_bik_t: c.l_bik_t,
                l_bik_s: c.l_bik_s,
                uploaded_floats: c.uploaded_floats,
                full_floats: c.full_floats,
                wall_ms: r.wall_ms,
            })
        })
        .collect();
    rows.push(MetricsRow {
        round: r.round,
        scope: "mean".into(),
        split: "test".into(),
        accuracy: r.mean_accuracy,
        l_bik_t: mean_of(r.clients.iter().filter_map(|c| c.l_bik_t)),
        l_bik_s: mean_of(r.clients.iter().filter_map(|c| c.l_bik_s)),
        uploaded_floats: r.uploaded_floats,
        full_floats: r.full_floats,
        wall_ms: r.wall_ms,
    });
    rows
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn format_metrics(rows: &[MetricsRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.3}",
            r.round,
            r.scope,
            r.split,
            r.accuracy,
            opt(r.l_bik_t),
            opt(r.l_bik_s),
            r.uploaded_floats,
            r.full_floats,
            r.wall_ms
        );
    }
    s
}

pub fn write_metrics(path: impl AsRef<Path>, rows: &[MetricsRow]) -> Result<()> {
    fs::write(path, format_metrics(rows))?;
    Ok(())
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Input("metrics file has an unexpected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = || Error::Input(format!("metrics line {}: malformed row", i + 2));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad());
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let int = |s: &str| s.parse::<usize>().map_err(|_| bad());
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(MetricsRow {
                round: int(f[0])?,
                scope: f[1].to_string(),
                split: f[2].to_string(),
                accuracy: num(f[3])?,
                l_bik_t: opt(f[4])?,
                l_bik_s: opt(f[5])?,
                uploaded_floats: int(f[6])?,
                full_floats: int(f[7])?,
                wall_ms: num(f[8])?,
            })
        })
        .collect()
}

pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<MetricsRow>> {
    parse_metrics(&fs::read_to_string(path)?)
}

/// Machine-readable digest written next to the metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDigest {
    pub strategy: String,
    pub seed: u64,
    pub rounds: usize,
    pub final_mean_accuracy: f64,
    pub mean_accuracy_per_round: Vec<f64>,
    pub uploaded_floats: usize,
    pub full_floats: usize,
    pub compression_ratio: Option<f64>,
    pub downlink_floats: usize,
    pub downlink_full_floats: usize,
    pub dropped_clients: usize,
}

impl RunDigest {
    pub fn new(cfg: &ExperimentConfig, outcome: &ExperimentOutcome) -> Self {
        let up: usize = outcome.rounds.iter().map(|r| r.uploaded_floats).sum();
        let full: usize = outcome.rounds.iter().map(|r| r.full_floats).sum();
        Self {
            strategy: cfg.strategy.as_str().into(),
            seed: cfg.seed,
            rounds: cfg.rounds,
            final_mean_accuracy: outcome.final_mean_accuracy(),
            mean_accuracy_per_round: outcome.rounds.iter().map(|r| r.mean_accuracy).collect(),
            uploaded_floats: up,
            full_floats: full,
            compression_ratio: (full > 0).then(|| up as f64 / full as f64),
            downlink_floats: outcome.rounds.iter().map(|r| r.downlink_floats).sum(),
            downlink_full_floats: outcome.rounds.iter().map(|r| r.downlink_full_floats).sum(),
            dropped_clients: outcome.rounds.iter().map(|r| r.dropped.len()).sum(),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// `key=value` assignments applied after the file, in order.
    pub overrides: Vec<String>,
    pub force: bool,
    pub out: Option<PathBuf>,
}

#[derive(Debug)]
pub struct RunResult {
    pub dir: PathBuf,
    pub config: ExperimentConfig,
    pub outcome: ExperimentOutcome,
}

/// Loads a config file, applies overrides and runs it.
pub fn run(config_path: impl AsRef<Path>, opts: &RunOptions, exec: Executor) -> Result<RunResult> {
    let mut cfg = ExperimentConfig::from_file(config_path)?;
    for o in &opts.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    run_config(&cfg, opts.force, exec)
}

/// Runs a resolved config and writes `metrics.csv`, `summary.json` and
/// `config.ini` into its output directory.
pub fn run_config(cfg: &ExperimentConfig, force: bool, exec: Executor) -> Result<RunResult> {
    cfg.validate()?;
    let dir = cfg.output_dir.clone();
    if !force {
        if let Some(f) = [METRICS_FILE, SUMMARY_FILE, CONFIG_FILE].iter().find(|f| dir.join(f).exists()) {
            return Err(Error::Config(format!(
                "{} already contains {f}; refusing to overwrite without --force",
                dir.display()
            )));
        }
    }
    let outcome = run_experiment(cfg, exec)?;
    fs::create_dir_all(&dir)?;
    let rows: Vec<MetricsRow> = outcome.rounds.iter().flat_map(rows_for_round).collect();
    write_metrics(dir.join(METRICS_FILE), &rows)?;
    let digest = serde_json::to_string_pretty(&RunDigest::new(cfg, &outcome))
        .map_err(|e| Error::Input(format!("cannot serialize summary: {e}")))?;
    fs::write(dir.join(SUMMARY_FILE), digest + "\n")?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_ini())?;
    Ok(RunResult { dir, config: cfg.clone(), outcome })
}
