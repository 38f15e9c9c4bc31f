//! Dynamic parameter decomposition of model deltas.
//!
//! Each large parameter tensor is viewed as a P×Q matrix, split at rank
//! `r = max(P,Q) / min(P,Q)` into `g_p · g_n` by truncated SVD, and each
//! factor is decomposed again. How many singular triplets of each factor
//! are kept is decided by a variance-explained threshold, optionally
//! refined by an AIC search over a calibration likelihood.

pub mod wire;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{reconstruct, svd, Svd};
use crate::nn::{TensorMap, PROB_EPS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DpdMode {
    /// No decomposition; every tensor travels raw.
    Full,
    /// Smallest K over the variance threshold.
    VarianceOnly,
    /// AIC search in a window above the variance threshold.
    AicVariance,
}

impl DpdMode {
    pub fn as_str(self) -> &'static str {
        match self {
            DpdMode::Full => "full",
            DpdMode::VarianceOnly => "variance_only",
            DpdMode::AicVariance => "aic_variance",
        }
    }
}

impl std::str::FromStr for DpdMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(DpdMode::Full),
            "variance_only" => Ok(DpdMode::VarianceOnly),
            "aic_variance" => Ok(DpdMode::AicVariance),
            other => Err(Error::Config(format!("unknown dpd mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpdConfig {
    pub alpha: f64,
    pub aic_window: usize,
    pub calib_size: usize,
    pub min_compress_elems: usize,
    pub mode: DpdMode,
}

impl Default for DpdConfig {
    fn default() -> Self {
        Self { alpha: 0.98, aic_window: 4, calib_size: 32, min_compress_elems: 1024, mode: DpdMode::AicVariance }
    }
}

impl DpdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must be in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

/// Views a tensor as a matrix: 2-D unchanged, conv (o,i,kh,kw) → o×(i·kh·kw),
/// 1-D → 1×len.
pub fn reshape_to_matrix(t: &Tensor) -> (Tensor, Vec<usize>) {
    let orig = t.dims().to_vec();
    let (p, q) = match orig.len() {
        1 => (1, orig[0]),
        _ => (orig[0], orig[1..].iter().product()),
    };
    (Tensor::from_parts(vec![p, q], t.data().to_vec()), orig)
}

/// `max(P,Q) / min(P,Q)` clamped to `[1, min(P,Q)]`.
pub fn split_rank(p: usize, q: usize) -> usize {
    let (lo, hi) = (p.min(q).max(1), p.max(q).max(1));
    (hi / lo).clamp(1, lo)
}

/// Best rank-`r` factorisation `m ≈ g_p · g_n` with √σ on both sides.
pub fn factor_split(m: &Tensor, r: usize) -> Result<(Tensor, Tensor)> {
    let d = svd(m)?.truncate(r);
    Ok(balanced_factors(&d))
}

fn balanced_factors(d: &Svd) -> (Tensor, Tensor) {
    let k = d.s.len();
    let roots: Vec<f64> = d.s.iter().map(|s| s.sqrt()).collect();
    let mut gp = d.u.clone();
    let (p, q) = (gp.rows(), d.v.cols());
    for i in 0..p {
        for j in 0..k {
            gp.data_mut()[i * k + j] *= roots[j];
        }
    }
    let mut gn = d.v.clone();
    for j in 0..k {
        for c in 0..q {
            gn.data_mut()[j * q + c] *= roots[j];
        }
    }
    (gp, gn)
}

/// Cumulative squared-singular-value fractions.
pub fn variance_ratios(singulars: &[f64]) -> Vec<f64> {
    let total: f64 = singulars.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    singulars
        .iter()
        .map(|s| {
            acc += s * s;
            if total > 0.0 {
                acc / total
            } else {
                1.0
            }
        })
        .collect()
}

/// Smallest K whose explained-variance ratio exceeds `alpha`; the full
/// length when no K does, and 1 for an all-zero spectrum.
pub fn variance_k(singulars: &[f64], alpha: f64) -> usize {
    if singulars.iter().all(|s| *s == 0.0) {
        return 1;
    }
    variance_ratios(singulars)
        .iter()
        .position(|&r| r > alpha)
        .map_or(singulars.len(), |i| i + 1)
}

/// Reporting form `2K − 2·Σ ln P`.
pub fn aic_value(k: usize, log_likelihood: f64) -> f64 {
    2.0 * k as f64 - 2.0 * log_likelihood
}

/// Chooses how many singular triplets to keep.
///
/// `likelihood(K)` returns `Σ ln P(y|x; θ_K)` and is only called in
/// `aic_variance` mode, for K in `K*..=min(K*+W, len)`.
pub fn select_k<F>(singulars: &[f64], cfg: &DpdConfig, mut likelihood: F) -> Result<usize>
where
    F: FnMut(usize) -> Result<f64>,
{
    if singulars.is_empty() {
        return Err(Error::Input("empty spectrum".into()));
    }
    let n = singulars.len();
    match cfg.mode {
        DpdMode::Full => Ok(n),
        DpdMode::VarianceOnly => Ok(variance_k(singulars, cfg.alpha)),
        DpdMode::AicVariance => {
            let k_star = variance_k(singulars, cfg.alpha);
            let hi = (k_star + cfg.aic_window).min(n);
            let mut best = (k_star, f64::INFINITY);
            for k in k_star..=hi {
                let a = k as f64 - likelihood(k)?;
                if a < best.1 {
                    best = (k, a);
                }
            }
            Ok(best.0)
        }
    }
}

/// Truncated SVD factors of `g_p` (P×r) and `g_n` (r×Q) in wire precision.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRank {
    pub p: usize,
    pub q: usize,
    pub r: usize,
    pub k_p: usize,
    pub k_n: usize,
    pub u_p: Vec<f32>,
    pub s_p: Vec<f32>,
    pub v_p: Vec<f32>,
    pub u_n: Vec<f32>,
    pub s_n: Vec<f32>,
    pub v_n: Vec<f32>,
}

impl LowRank {
    pub fn payload_floats(&self) -> usize {
        lowrank_floats(self.p, self.q, self.r, self.k_p, self.k_n)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::CorruptUpdate(m.into()));
        let (p, q, r) = (self.p, self.q, self.r);
        if p == 0 || q == 0 || r == 0 || r > p.min(q) {
            return bad("split rank out of range");
        }
        if self.k_p == 0 || self.k_p > p.min(r) || self.k_n == 0 || self.k_n > r.min(q) {
            return bad("retained rank out of range");
        }
        let lens = [
            (self.u_p.len(), p * self.k_p),
            (self.s_p.len(), self.k_p),
            (self.v_p.len(), self.k_p * r),
            (self.u_n.len(), r * self.k_n),
            (self.s_n.len(), self.k_n),
            (self.v_n.len(), self.k_n * q),
        ];
        if lens.iter().any(|(a, b)| a != b) {
            return bad("factor length mismatch");
        }
        for s in [&self.s_p, &self.s_n] {
            if s.iter().any(|v| v.is_nan() || *v < 0.0) || s.windows(2).any(|w| w[0] < w[1]) {
                return bad("singular values must be nonnegative and descending");
            }
        }
        Ok(())
    }

    fn to_matrix(&self) -> Result<Tensor> {
        let t = |dims: Vec<usize>, v: &[f32]| {
            Tensor::new(dims, v.iter().map(|&x| x as f64).collect())
                .map_err(|e| Error::CorruptUpdate(e.to_string()))
        };
        let s = |v: &[f32]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let a = reconstruct(&t(vec![self.p, self.k_p], &self.u_p)?, &s(&self.s_p), &t(vec![self.k_p, self.r], &self.v_p)?);
        let b = reconstruct(&t(vec![self.r, self.k_n], &self.u_n)?, &s(&self.s_n), &t(vec![self.k_n, self.q], &self.v_n)?);
        a.matmul(&b)
    }
}

/// Float count of a low-rank payload: `P·K_p + K_p + K_p·r + r·K_n + K_n + K_n·Q`.
pub fn lowrank_floats(p: usize, q: usize, r: usize, k_p: usize, k_n: usize) -> usize {
    p * k_p + k_p + k_p * r + r * k_n + k_n + k_n * q
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Raw(Vec<f32>),
    LowRank(LowRank),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedMatrix {
    pub name: String,
    pub orig_dims: Vec<usize>,
    pub payload: Payload,
}

impl CompressedMatrix {
    pub fn raw(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.to_string(),
            orig_dims: t.dims().to_vec(),
            payload: Payload::Raw(t.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn payload_floats(&self) -> usize {
        match &self.payload {
            Payload::Raw(v) => v.len(),
            Payload::LowRank(l) => l.payload_floats(),
        }
    }

    pub fn full_floats(&self) -> usize {
        self.orig_dims.iter().product()
    }

    pub fn is_lowrank(&self) -> bool {
        matches!(self.payload, Payload::LowRank(_))
    }

    pub fn decompress(&self) -> Result<Tensor> {
        let n = self.full_floats();
        if self.orig_dims.is_empty() || n == 0 {
            return Err(Error::CorruptUpdate(format!("`{}` has empty dims", self.name)));
        }
        let flat = match &self.payload {
            Payload::Raw(v) => {
                if v.len() != n {
                    return Err(Error::CorruptUpdate(format!("`{}` raw payload length", self.name)));
                }
                v.iter().map(|&x| x as f64).collect()
            }
            Payload::LowRank(l) => {
                l.validate()?;
                if l.p * l.q != n {
                    return Err(Error::CorruptUpdate(format!("`{}` P·Q != prod(dims)", self.name)));
                }
                l.to_matrix()?.into_data()
            }
        };
        Tensor::new(self.orig_dims.clone(), flat).map_err(|e| Error::CorruptUpdate(e.to_string()))
    }
}

/// Everything a client sends to the server in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedUpdate {
    pub client_id: u32,
    pub sample_count: u64,
    pub matrices: Vec<CompressedMatrix>,
}

impl CompressedUpdate {
    pub fn uploaded_float_count(&self) -> usize {
        self.matrices.iter().map(CompressedMatrix::payload_floats).sum()
    }

    pub fn full_float_count(&self) -> usize {
        self.matrices.iter().map(CompressedMatrix::full_floats).sum()
    }

    /// Raw (uncompressed) transmission of every tensor.
    pub fn raw(client_id: u32, sample_count: u64, delta: &TensorMap) -> Self {
        let matrices = delta.iter().map(|(n, t)| CompressedMatrix::raw(n, t)).collect();
        Self { client_id, sample_count, matrices }
    }
}

/// Scores a candidate delta by the calibration log-likelihood
/// `Σ ln max(P(y|x; θ_received + delta), ε)`.
pub trait LikelihoodEval {
    fn log_likelihood(&self, delta: &TensorMap) -> Result<f64>;
}

/// Sums `ln max(p[i, y_i], ε)` over a probability batch.
pub fn sum_log_prob(probs: &Tensor, labels: &[usize]) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(i, &y)| probs.at(i, y).max(PROB_EPS).ln())
        .sum()
}

fn to_f32(t: &Tensor) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

pub fn compress_update(
    client_id: u32,
    sample_count: u64,
    delta: &TensorMap,
    cfg: &DpdConfig,
    eval: Option<&dyn LikelihoodEval>,
) -> Result<CompressedUpdate> {
    cfg.validate()?;
    if cfg.mode == DpdMode::AicVariance && eval.is_none() {
        return Err(Error::Compression("aic_variance needs a calibration evaluator".into()));
    }
    let mut matrices = Vec::with_capacity(delta.len());
    for (name, tensor) in delta {
        let (mat, orig) = reshape_to_matrix(tensor);
        let (p, q) = (mat.rows(), mat.cols());
        if cfg.mode == DpdMode::Full || tensor.len() < cfg.min_compress_elems || p.min(q) == 1 {
            matrices.push(CompressedMatrix::raw(name, tensor));
            continue;
        }
        let r = split_rank(p, q);
        let (gp, gn) = factor_split(&mat, r)?;
        let sp = svd(&gp)?;
        let sn = svd(&gn)?;

        let score = |candidate: Tensor| -> Result<f64> {
            let eval = eval.expect("checked above");
            let mut trial = delta.clone();
            let t = candidate.reshape(orig.clone())?;
            trial.insert(name.clone(), t);
            let ll = eval
                .log_likelihood(&trial)
                .map_err(|e| Error::Compression(format!("evaluator failed: {e}")))?;
            if !ll.is_finite() {
                return Err(Error::Compression("evaluator returned a non-finite likelihood".into()));
            }
            Ok(ll)
        };
        let k_p = select_k(&sp.s, cfg, |k| score(sp.truncate(k).reconstruct().matmul(&gn)?))?;
        let k_n = select_k(&sn.s, cfg, |k| score(gp.matmul(&sn.truncate(k).reconstruct())?))?;

        if lowrank_floats(p, q, r, k_p, k_n) >= p * q {
            matrices.push(CompressedMatrix::raw(name, tensor));
            continue;
        }
        let (tp, tn) = (sp.truncate(k_p), sn.truncate(k_n));
        let low = LowRank {
            p,
            q,
            r,
            k_p,
            k_n,
            u_p: to_f32(&tp.u),
            s_p: tp.s.iter().map(|&v| v as f32).collect(),
            v_p: to_f32(&tp.v),
            u_n: to_f32(&tn.u),
            s_n: tn.s.iter().map(|&v| v as f32).collect(),
            v_n: to_f32(&tn.v),
        };
        matrices.push(CompressedMatrix { name: name.clone(), orig_dims: orig, payload: Payload::LowRank(low) });
    }
    Ok(CompressedUpdate { client_id, sample_count, matrices })
}

pub fn decompress_update(c: &CompressedUpdate) -> Result<TensorMap> {
    let mut out = TensorMap::with_capacity(c.matrices.len());
    for m in &c.matrices {
        if out.insert(m.name.clone(), m.decompress()?).is_some() {
            return Err(Error::CorruptUpdate(format!("duplicate entry `{}`", m.name)));
        }
    }
    Ok(out)
}
