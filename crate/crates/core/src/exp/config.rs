//! Experiment configuration in `key = value` form with `[section]` headers.
//!
//! Sections: `experiment`, `model`, `dpd`, `partition`, `dataset`. Unknown
//! sections and keys are rejected; anything omitted keeps its default.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticSpec;
use crate::dpd::{DpdConfig, DpdMode};
use crate::error::{Error, Result};
use crate::nn::ModelKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Prfl,
    #[serde(rename = "fedavg")]
    FedAvg,
    Local,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Prfl => "prfl",
            Strategy::FedAvg => "fedavg",
            Strategy::Local => "local",
        }
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prfl" => Ok(Strategy::Prfl),
            "fedavg" => Ok(Strategy::FedAvg),
            "local" => Ok(Strategy::Local),
            other => Err(Error::Config(format!("unknown strategy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden: usize,
    pub channels: [usize; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartitionKind {
    Pathological,
    Dirichlet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    pub lambda: f64,
    pub classes_per_client: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rounds: usize,
    pub local_steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub clients: usize,
    pub participation_ratio: f64,
    pub strategy: Strategy,
    pub dp_tau: f64,
    pub downlink_compress: bool,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub dpd: DpdConfig,
    pub partition: PartitionConfig,
    pub dataset: DatasetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 100,
            local_steps: 5,
            lr: 5e-3,
            batch_size: 32,
            clients: 20,
            participation_ratio: 0.1,
            strategy: Strategy::Prfl,
            dp_tau: 0.0,
            downlink_compress: true,
            output_dir: PathBuf::from("runs/prfl"),
            model: ModelConfig { kind: ModelKind::Mlp, hidden: 64, channels: [8, 16] },
            dpd: DpdConfig::default(),
            partition: PartitionConfig { kind: PartitionKind::Dirichlet, lambda: 0.1, classes_per_client: 2 },
            dataset: DatasetConfig {
                kind: DatasetKind::Synthetic,
                path: None,
                synthetic: SyntheticSpec {
                    num_classes: 8,
                    dims: vec![16],
                    n_per_class: 200,
                    spread: 1.0,
                    separation: 1.0,
                },
            },
        }
    }
}

const SECTIONS: &[(&str, &[&str])] = &[
    (
        "experiment",
        &[
            "seed",
            "rounds",
            "local_steps",
            "lr",
            "batch_size",
            "clients",
            "participation_ratio",
            "strategy",
            "dp_tau",
            "downlink_compress",
            "output_dir",
        ],
    ),
    ("model", &["kind", "hidden", "channels"]),
    ("dpd", &["alpha", "mode", "aic_window", "calib_size", "min_compress_elems"]),
    ("partition", &["kind", "lambda", "classes_per_client"]),
    ("dataset", &["kind", "path", "classes", "dims", "n_per_class", "spread", "separation"]),
];

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|p| parse::<usize>(key, p.trim())).collect()
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected a boolean, got `{value}`"))),
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        Self::parse_str(&text)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<&str> = None;
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::Config(format!("line {line_no}: malformed section header")))?
                    .trim();
                let known = SECTIONS.iter().find(|(s, _)| *s == name);
                section = Some(
                    known
                        .ok_or_else(|| Error::Config(format!("line {line_no}: unknown section `{name}`")))?
                        .0,
                );
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {line_no}: expected `key = value`")))?;
            let sec = section
                .ok_or_else(|| Error::Config(format!("line {line_no}: key outside of any section")))?;
            cfg.set(sec, key.trim(), value.trim().trim_matches('"'))
                .map_err(|e| match e {
                    Error::Config(m) => Error::Config(format!("line {line_no}: {m}")),
                    other => other,
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `key=value` or `section.key=value`. A bare key must be unique
    /// across sections.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (lhs, value) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let lhs = lhs.trim();
        let (section, key) = match lhs.split_once('.') {
            Some((s, k)) => (s.to_string(), k.to_string()),
            None => {
                let owners: Vec<&str> =
                    SECTIONS.iter().filter(|(_, keys)| keys.contains(&lhs)).map(|(s, _)| *s).collect();
                match owners.as_slice() {
                    [one] => (one.to_string(), lhs.to_string()),
                    [] => return Err(Error::Config(format!("unknown key `{lhs}`"))),
                    _ => return Err(Error::Config(format!("key `{lhs}` is ambiguous; use section.{lhs}"))),
                }
            }
        };
        self.set(&section, &key, value.trim())?;
        self.validate()
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        match (section, key) {
            ("experiment", "seed") => self.seed = parse(key, v)?,
            ("experiment", "rounds") => self.rounds = parse(key, v)?,
            ("experiment", "local_steps") => self.local_steps = parse(key, v)?,
            ("experiment", "lr") => self.lr = parse(key, v)?,
            ("experiment", "batch_size") => self.batch_size = parse(key, v)?,
            ("experiment", "clients") => self.clients = parse(key, v)?,
            ("experiment", "participation_ratio") => self.participation_ratio = parse(key, v)?,
            ("experiment", "strategy") => self.strategy = v.parse()?,
            ("experiment", "dp_tau") => self.dp_tau = parse(key, v)?,
            ("experiment", "downlink_compress") => self.downlink_compress = parse_bool(key, v)?,
            ("experiment", "output_dir") => self.output_dir = PathBuf::from(v),
            ("model", "kind") => {
                self.model.kind = match v {
                    "mlp" => ModelKind::Mlp,
                    "smallcnn" => ModelKind::SmallCnn,
                    _ => return Err(Error::Config(format!("`kind`: unknown model `{v}`"))),
                }
            }
            ("model", "hidden") => self.model.hidden = parse(key, v)?,
            ("model", "channels") => {
                let c = parse_list(key, v)?;
                self.model.channels = c
                    .try_into()
                    .map_err(|_| Error::Config("`channels` needs exactly two values".into()))?;
            }
            ("dpd", "alpha") => self.dpd.alpha = parse(key, v)?,
            ("dpd", "mode") => self.dpd.mode = v.parse::<DpdMode>()?,
            ("dpd", "aic_window") => self.dpd.aic_window = parse(key, v)?,
            ("dpd", "calib_size") => self.dpd.calib_size = parse(key, v)?,
            ("dpd", "min_compress_elems") => self.dpd.min_compress_elems = parse(key, v)?,
            ("partition", "kind") => {
                self.partition.kind = match v {
                    "pathological" => PartitionKind::Pathological,
                    "dirichlet" => PartitionKind::Dirichlet,
                    _ => return Err(Error::Config(format!("`kind`: unknown partition `{v}`"))),
                }
            }
            ("partition", "lambda") => self.partition.lambda = parse(key, v)?,
            ("partition", "classes_per_client") => self.partition.classes_per_client = parse(key, v)?,
            ("dataset", "kind") => {
                self.dataset.kind = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "file" => DatasetKind::File,
                    _ => return Err(Error::Config(format!("`kind`: unknown dataset kind `{v}`"))),
                }
            }
            ("dataset", "path") => self.dataset.path = Some(PathBuf::from(v)),
            ("dataset", "classes") => self.dataset.synthetic.num_classes = parse(key, v)?,
            ("dataset", "dims") => self.dataset.synthetic.dims = parse_list(key, v)?,
            ("dataset", "n_per_class") => self.dataset.synthetic.n_per_class = parse(key, v)?,
            ("dataset", "spread") => self.dataset.synthetic.spread = parse(key, v)?,
            ("dataset", "separation") => self.dataset.synthetic.separation = parse(key, v)?,
            (s, k) if SECTIONS.iter().any(|(name, _)| *name == s) => {
                return Err(Error::Config(format!("unknown key `{k}` in [{s}]")))
            }
            (s, _) => return Err(Error::Config(format!("unknown section `{s}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, why: &str| Err(Error::Config(format!("`{key}` {why}")));
        if self.local_steps == 0 {
            return fail("local_steps", "must be >= 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr", "must be > 0");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1");
        }
        if self.clients == 0 {
            return fail("clients", "must be >= 1");
        }
        if !(self.participation_ratio > 0.0 && self.participation_ratio <= 1.0) {
            return fail("participation_ratio", "must be in (0, 1]");
        }
        if !(self.dp_tau >= 0.0 && self.dp_tau.is_finite()) {
            return fail("dp_tau", "must be >= 0");
        }
        if !(self.dpd.alpha > 0.0 && self.dpd.alpha <= 1.0) {
            return fail("alpha", "must be in (0, 1]");
        }
        if self.dpd.calib_size == 0 {
            return fail("calib_size", "must be >= 1");
        }
        if self.model.hidden == 0 {
            return fail("hidden", "must be >= 1");
        }
        if self.model.channels.contains(&0) {
            return fail("channels", "must be positive");
        }
        if self.partition.kind == PartitionKind::Dirichlet && !(self.partition.lambda > 0.0 && self.partition.lambda.is_finite()) {
            return fail("lambda", "must be > 0");
        }
        if self.partition.classes_per_client == 0 {
            return fail("classes_per_client", "must be >= 1");
        }
        match self.dataset.kind {
            DatasetKind::File if self.dataset.path.is_none() => return fail("path", "is required for file datasets"),
            DatasetKind::Synthetic => {
                let s = &self.dataset.synthetic;
                if s.num_classes < 2 {
                    return fail("classes", "must be >= 2");
                }
                if s.n_per_class == 0 {
                    return fail("n_per_class", "must be >= 1");
                }
                if s.dims.is_empty() || s.dims.contains(&0) {
                    return fail("dims", "must be positive");
                }
                if !(s.spread >= 0.0 && s.separation >= 0.0) {
                    return fail("spread", "and separation must be >= 0");
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Resolved configuration in the same format `parse_str` reads.
    pub fn to_ini(&self) -> String {
        let mut s = String::new();
        let model_kind = match self.model.kind {
            ModelKind::Mlp => "mlp",
            ModelKind::SmallCnn => "smallcnn",
        };
        let part_kind = match self.partition.kind {
            PartitionKind::Pathological => "pathological",
            PartitionKind::Dirichlet => "dirichlet",
        };
        let data_kind = match self.dataset.kind {
            DatasetKind::Synthetic => "synthetic",
            DatasetKind::File => "file",
        };
        let syn = &self.dataset.synthetic;
        let _ = writeln!(s, "[experiment]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "rounds = {}", self.rounds);
        let _ = writeln!(s, "local_steps = {}", self.local_steps);
        let _ = writeln!(s, "lr = {:?}", self.lr);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "clients = {}", self.clients);
        let _ = writeln!(s, "participation_ratio = {:?}", self.participation_ratio);
        let _ = writeln!(s, "strategy = {}", self.strategy.as_str());
        let _ = writeln!(s, "dp_tau = {:?}", self.dp_tau);
        let _ = writeln!(s, "downlink_compress = {}", self.downlink_compress);
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        let _ = writeln!(s, "\n[model]");
        let _ = writeln!(s, "kind = {model_kind}");
        let _ = writeln!(s, "hidden = {}", self.model.hidden);
        let _ = writeln!(s, "channels = {}", join(&self.model.channels));
        let _ = writeln!(s, "\n[dpd]");
        let _ = writeln!(s, "alpha = {:?}", self.dpd.alpha);
        let _ = writeln!(s, "mode = {}", self.dpd.mode.as_str());
        let _ = writeln!(s, "aic_window = {}", self.dpd.aic_window);
        let _ = writeln!(s, "calib_size = {}", self.dpd.calib_size);
        let _ = writeln!(s, "min_compress_elems = {}", self.dpd.min_compress_elems);
        let _ = writeln!(s, "\n[partition]");
        let _ = writeln!(s, "kind = {part_kind}");
        let _ = writeln!(s, "lambda = {:?}", self.partition.lambda);
        let _ = writeln!(s, "classes_per_client = {}", self.partition.classes_per_client);
        let _ = writeln!(s, "\n[dataset]");
        let _ = writeln!(s, "kind = {data_kind}");
        if let Some(p) = &self.dataset.path {
            let _ = writeln!(s, "path = {}", p.display());
        }
        let _ = writeln!(s, "classes = {}", syn.num_classes);
        let _ = writeln!(s, "dims = {}", join(&syn.dims));
        let _ = writeln!(s, "n_per_class = {}", syn.n_per_class);
        let _ = writeln!(s, "spread = {:?}", syn.spread);
        let _ = writeln!(s, "separation = {:?}", syn.separation);
        s
    }
}
