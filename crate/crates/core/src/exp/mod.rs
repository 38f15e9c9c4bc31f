//! Experiment plumbing: configuration, run directories and reports.

pub mod config;
pub mod report;
pub mod run;

pub use config::ExperimentConfig;
pub use report::{compression_report, summarize, CompressionReport, RunSummary, StrategySummary, SummaryTable};
pub use run::{read_metrics, run, run_config, write_metrics, MetricsRow, RunDigest, RunOptions, RunResult, METRICS_HEADER};
