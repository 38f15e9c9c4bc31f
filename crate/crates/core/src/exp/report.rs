//! Multi-run summaries and compression reports read back from run directories.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::exp::config::{ExperimentConfig, Strategy};
use crate::exp::run::{read_metrics, MetricsRow, CONFIG_FILE, METRICS_FILE};

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary {
    pub dir: PathBuf,
    pub strategy: String,
    pub seed: u64,
    pub final_accuracy: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub runs: usize,
    pub mean: f64,
    /// Population standard deviation over runs.
    pub std: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SummaryTable {
    pub rows: Vec<StrategySummary>,
    pub runs: Vec<RunSummary>,
}

impl SummaryTable {
    pub fn row(&self, strategy: &str) -> Option<&StrategySummary> {
        self.rows.iter().find(|r| r.strategy == strategy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary is always serializable")
    }
}

impl fmt::Display for SummaryTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# final-round mean client test accuracy; std is the population std over runs")?;
        writeln!(f, "{:<10} {:>5} {:>10} {:>10}", "strategy", "runs", "mean", "std")?;
        for r in &self.rows {
            writeln!(f, "{:<10} {:>5} {:>10.4} {:>10.4}", r.strategy, r.runs, r.mean, r.std)?;
        }
        Ok(())
    }
}

/// Mean and population std.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn final_mean_row(rows: &[MetricsRow]) -> Option<&MetricsRow> {
    rows.iter().filter(|r| r.scope == "mean").max_by_key(|r| r.round)
}

/// The parts of a config that must agree across runs being summarized.
fn comparable(cfg: &ExperimentConfig) -> ExperimentConfig {
    ExperimentConfig {
        seed: 0,
        strategy: Strategy::Prfl,
        output_dir: PathBuf::new(),
        ..cfg.clone()
    }
}

/// Final-round accuracy per run, grouped by strategy in order of first
/// appearance. Runs whose configs differ beyond seed, strategy and output
/// directory are refused unless `mixed`.
pub fn summarize<P: AsRef<Path>>(dirs: &[P], mixed: bool) -> Result<SummaryTable> {
    if dirs.is_empty() {
        return Err(Error::Input("no run directories given".into()));
    }
    let mut reference: Option<(PathBuf, ExperimentConfig)> = None;
    let mut runs = Vec::new();
    for dir in dirs {
        let dir = dir.as_ref();
        let cfg = ExperimentConfig::from_file(dir.join(CONFIG_FILE))?;
        match &reference {
            None => reference = Some((dir.to_path_buf(), comparable(&cfg))),
            Some((first, base)) if !mixed && *base != comparable(&cfg) => {
                return Err(Error::Config(format!(
                    "{} and {} were run with different settings; pass --mixed to summarize anyway",
                    first.display(),
                    dir.display()
                )))
            }
            Some(_) => {}
        }
        let rows = read_metrics(dir.join(METRICS_FILE))?;
        let last = final_mean_row(&rows)
            .ok_or_else(|| Error::Input(format!("{} has no mean rows", dir.join(METRICS_FILE).display())))?;
        runs.push(RunSummary {
            dir: dir.to_path_buf(),
            strategy: cfg.strategy.as_str().into(),
            seed: cfg.seed,
            final_accuracy: last.accuracy,
        });
    }
    let mut order: Vec<&str> = Vec::new();
    for r in &runs {
        if !order.contains(&r.strategy.as_str()) {
            order.push(&r.strategy);
        }
    }
    let rows = order
        .iter()
        .map(|s| {
            let accs: Vec<f64> = runs.iter().filter(|r| r.strategy == *s).map(|r| r.final_accuracy).collect();
            let (mean, std) = mean_std(&accs);
            StrategySummary { strategy: s.to_string(), runs: accs.len(), mean, std }
        })
        .collect();
    Ok(SummaryTable { rows, runs })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompressionReport {
    /// (round, uploaded floats, full floats) for every trained round.
    pub rounds: Vec<(usize, usize, usize)>,
    pub uploaded: usize,
    pub full: usize,
}

impl CompressionReport {
    /// Uploaded share of the uncompressed size in percent.
    pub fn percent(&self) -> Option<f64> {
        (self.full > 0).then(|| 100.0 * self.uploaded as f64 / self.full as f64)
    }
}

fn pct(up: usize, full: usize) -> String {
    if full == 0 {
        "n/a".into()
    } else {
        format!("{:.2}%", 100.0 * up as f64 / full as f64)
    }
}

impl fmt::Display for CompressionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:>6} {:>12} {:>12} {:>9}", "round", "uploaded", "full", "ratio")?;
        for &(round, up, full) in &self.rounds {
            writeln!(f, "{round:>6} {up:>12} {full:>12} {:>9}", pct(up, full))?;
        }
        writeln!(f, "{:>6} {:>12} {:>12} {:>9}", "total", self.uploaded, self.full, pct(self.uploaded, self.full))
    }
}

/// Uplink volume per round and overall, from a run directory's metrics.
pub fn compression_report(dir: impl AsRef<Path>) -> Result<CompressionReport> {
    let rows = read_metrics(dir.as_ref().join(METRICS_FILE))?;
    let rounds: Vec<(usize, usize, usize)> = rows
        .iter()
        .filter(|r| r.scope == "mean" && r.round > 0)
        .map(|r| (r.round, r.uploaded_floats, r.full_floats))
        .collect();
    Ok(CompressionReport {
        uploaded: rounds.iter().map(|r| r.1).sum(),
        full: rounds.iter().map(|r| r.2).sum(),
        rounds,
    })
}
