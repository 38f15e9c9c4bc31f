//! Desk-scale classifiers with an explicit backbone/head split.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{softmax_rows, Gradients, Tape, Var, PROB_EPS};
use super::TensorMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Mlp,
    #[serde(rename = "smallcnn")]
    SmallCnn,
}

/// Architecture description shared by every model in an experiment.
///
/// * `mlp`: flatten → linear(hidden) → tanh → linear(C).
/// * `smallcnn`: two (3×3 conv, ReLU, 2×2 max-pool) blocks → flatten →
///   linear(hidden) → ReLU → linear(C). Input dims are (channels, height, width).
///
/// `hidden` is the backbone output width in both cases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dims: Vec<usize>,
    pub hidden: usize,
    pub channels: [usize; 2],
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn mlp(input: usize, hidden: usize, num_classes: usize) -> Self {
        Self { kind: ModelKind::Mlp, input_dims: vec![input], hidden, channels: [0, 0], num_classes }
    }

    pub fn small_cnn(input_dims: [usize; 3], channels: [usize; 2], hidden: usize, num_classes: usize) -> Self {
        Self {
            kind: ModelKind::SmallCnn,
            input_dims: input_dims.to_vec(),
            hidden,
            channels,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be >= 2, got {}", self.num_classes)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        if self.input_dims.is_empty() || self.input_dims.contains(&0) {
            return Err(Error::Config(format!("invalid input dims {:?}", self.input_dims)));
        }
        if self.kind == ModelKind::SmallCnn {
            if self.input_dims.len() != 3 {
                return Err(Error::Config("smallcnn input must be (channels, height, width)".into()));
            }
            if self.input_dims[1] < 4 || self.input_dims[2] < 4 {
                return Err(Error::Config("smallcnn input needs height and width >= 4".into()));
            }
            if self.channels.contains(&0) {
                return Err(Error::Config("smallcnn channel plan must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn input_len(&self) -> usize {
        self.input_dims.iter().product()
    }

    /// Width `d` of the backbone output.
    pub fn hidden_width(&self) -> usize {
        self.hidden
    }

    fn flat_conv_width(&self) -> usize {
        let (h, w) = (self.input_dims[1] / 2 / 2, self.input_dims[2] / 2 / 2);
        self.channels[1] * h * w
    }

    /// Parameter layout: (name, dims, fan_in, role).
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize, ParamRole)> {
        use ParamRole::{Backbone, Head};
        let (d, c) = (self.hidden, self.num_classes);
        let mut out = match self.kind {
            ModelKind::Mlp => {
                let n = self.input_len();
                vec![("backbone.w", vec![d, n], n, Backbone), ("backbone.b", vec![d], n, Backbone)]
            }
            ModelKind::SmallCnn => {
                let cin = self.input_dims[0];
                let [c1, c2] = self.channels;
                let flat = self.flat_conv_width();
                vec![
                    ("backbone.conv1.w", vec![c1, cin, 3, 3], cin * 9, Backbone),
                    ("backbone.conv1.b", vec![c1], cin * 9, Backbone),
                    ("backbone.conv2.w", vec![c2, c1, 3, 3], c1 * 9, Backbone),
                    ("backbone.conv2.b", vec![c2], c1 * 9, Backbone),
                    ("backbone.fc.w", vec![d, flat], flat, Backbone),
                    ("backbone.fc.b", vec![d], flat, Backbone),
                ]
            }
        };
        out.push(("head.w", vec![c, d], d, Head));
        out.push(("head.b", vec![c], d, Head));
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamRole {
    Backbone,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub tensor: Tensor,
    pub role: ParamRole,
}

/// Named parameters of one model, in a fixed order determined by its spec.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    spec: ModelSpec,
    entries: Vec<ParamEntry>,
}

impl ModelParams {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|e| e.name == name).map(|e| &mut e.tensor)
    }

    pub fn num_floats(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    /// Same spec with every tensor set to zero.
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for e in &mut out.entries {
            e.tensor = Tensor::zeros(e.tensor.dims());
        }
        out
    }

    pub fn to_map(&self) -> TensorMap {
        self.entries.iter().map(|e| (e.name.clone(), e.tensor.clone())).collect()
    }

    /// `self - base`, entry by entry.
    pub fn delta_from(&self, base: &ModelParams) -> Result<TensorMap> {
        self.check_compatible(base)?;
        self.entries
            .iter()
            .zip(&base.entries)
            .map(|(a, b)| Ok((a.name.clone(), a.tensor.sub(&b.tensor)?)))
            .collect()
    }

    /// `self + delta`; every parameter must be present in `delta`.
    pub fn plus(&self, delta: &TensorMap) -> Result<ModelParams> {
        let mut out = self.clone();
        for e in &mut out.entries {
            let d = delta
                .get(&e.name)
                .ok_or_else(|| Error::Contract(format!("delta is missing `{}`", e.name)))?;
            e.tensor = e.tensor.add(d)?;
        }
        Ok(out)
    }

    fn check_compatible(&self, other: &ModelParams) -> Result<()> {
        let same = self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.dims() == b.tensor.dims());
        if same {
            Ok(())
        } else {
            Err(Error::Shape("parameter sets differ in layout".into()))
        }
    }
}

/// Uniform fan-in initialisation with bound `sqrt(1 / fan_in)`.
pub fn build_model<R: Rng + ?Sized>(spec: &ModelSpec, rng: &mut R) -> Result<ModelParams> {
    spec.validate()?;
    let entries = spec
        .layout()
        .into_iter()
        .map(|(name, dims, fan_in, role)| {
            let bound = (1.0 / fan_in as f64).sqrt();
            let n: usize = dims.iter().product();
            let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
            ParamEntry { name: name.to_string(), tensor: Tensor::from_parts(dims, data), role }
        })
        .collect();
    Ok(ModelParams { spec: spec.clone(), entries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub hidden: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

/// A model whose parameters live on a tape as leaves.
#[derive(Debug, Clone)]
pub struct BoundModel {
    spec: ModelSpec,
    names: Vec<String>,
    vars: Vec<Var>,
}

/// Tape nodes produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub hidden: Var,
    pub logits: Var,
    pub probs: Var,
}

impl BoundModel {
    pub fn bind(tape: &mut Tape, params: &ModelParams) -> Self {
        let vars = params.entries.iter().map(|e| tape.leaf(e.tensor.clone())).collect();
        let names = params.entries.iter().map(|e| e.name.clone()).collect();
        Self { spec: params.spec.clone(), names, vars }
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.names.iter().map(String::as_str).zip(self.vars.iter().copied())
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.names.iter().position(|n| n == name).map(|i| self.vars[i])
    }

    /// Collects this model's parameter gradients from a backward sweep.
    pub fn grads(&self, g: &Gradients) -> TensorMap {
        self.vars().map(|(n, v)| (n.to_string(), g.wrt(v))).collect()
    }

    /// `batch` is a leaf holding (B, input dims...).
    pub fn forward(&self, tape: &mut Tape, batch: Var) -> Result<ForwardVars> {
        let dims = tape.value(batch).dims().to_vec();
        if dims.len() < 2 || dims[1..] != self.spec.input_dims[..] {
            return Err(Error::Shape(format!(
                "batch dims {dims:?} do not match model input {:?}",
                self.spec.input_dims
            )));
        }
        let b = dims[0];
        let v = &self.vars;
        let hidden = match self.spec.kind {
            ModelKind::Mlp => {
                let x = tape.reshape(batch, vec![b, self.spec.input_len()])?;
                let z = tape.linear(x, v[0], v[1])?;
                tape.tanh(z)
            }
            ModelKind::SmallCnn => {
                let z1 = tape.conv3x3(batch, v[0], v[1])?;
                let a1 = tape.relu(z1);
                let p1 = tape.maxpool2(a1)?;
                let z2 = tape.conv3x3(p1, v[2], v[3])?;
                let a2 = tape.relu(z2);
                let p2 = tape.maxpool2(a2)?;
                let flat = tape.reshape(p2, vec![b, self.spec.flat_conv_width()])?;
                let z3 = tape.linear(flat, v[4], v[5])?;
                tape.relu(z3)
            }
        };
        let n = v.len();
        let logits = tape.linear(hidden, v[n - 2], v[n - 1])?;
        let probs = tape.softmax(logits);
        Ok(ForwardVars { hidden, logits, probs })
    }
}

pub fn forward(params: &ModelParams, batch: &Tensor) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let model = BoundModel::bind(&mut tape, params);
    let x = tape.leaf(batch.clone());
    let out = model.forward(&mut tape, x)?;
    Ok(ForwardOutput {
        hidden: tape.value(out.hidden).clone(),
        logits: tape.value(out.logits).clone(),
        probs: tape.value(out.probs).clone(),
    })
}

/// `p - lr * g` for every parameter.
pub fn sgd_step(params: &ModelParams, grads: &TensorMap, lr: f64) -> Result<ModelParams> {
    let mut out = params.clone();
    for e in &mut out.entries {
        let g = grads
            .get(&e.name)
            .ok_or_else(|| Error::Contract(format!("no gradient for `{}`", e.name)))?;
        if g.dims() != e.tensor.dims() {
            return Err(Error::Shape(format!("gradient for `{}` has dims {:?}", e.name, g.dims())));
        }
        for (p, d) in e.tensor.data_mut().iter_mut().zip(g.data()) {
            *p -= lr * d;
        }
    }
    Ok(out)
}

pub fn softmax(logits: &Tensor) -> Tensor {
    softmax_rows(logits)
}

/// Mean over the batch of `-ln(max(p[i, y_i], 1e-12))`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let c = probs.cols();
    if labels.len() != probs.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", labels.len(), probs.rows())));
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::Input(format!("label {y} out of range for {c} classes")));
        }
        total -= probs.at(i, y).max(PROB_EPS).ln();
    }
    Ok(total / labels.len() as f64)
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let correct = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) == y)
        .count();
    correct as f64 / labels.len() as f64
}

pub(crate) fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
