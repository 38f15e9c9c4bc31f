//! Synchronized bidirectional distillation between a persistent local
//! teacher and the federated student.
//!
//! Both models see the same minibatch every step. The teacher is trained on
//! `l_bik_t = l_d_t + l_lrl + l_task_t`, the student on
//! `l_bik_s = l_d_s + l_lrl + l_task_s`, and the shared auxiliary matrix on
//! their sum. Inside each model's loss the other model's outputs are
//! detached, and the `l_task_t + l_task_s` denominators act as constant
//! weights.

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ClientSplit, Dataset};
use crate::error::{Error, Result};
use crate::nn::tape::kl_row;
use crate::nn::{sgd_step, BoundModel, ModelParams, Tape, TensorMap, Var};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// Guard added to the task-loss denominator.
pub const EPS_DEN: f64 = 1e-8;

/// Standard deviation of the noise added to the identity when creating `W_aux`.
pub const W_AUX_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cor: f64,
    pub l_task_t: f64,
    pub l_task_s: f64,
    pub l_lrl: f64,
    pub l_d_t: f64,
    pub l_d_s: f64,
    pub l_bik_t: f64,
    pub l_bik_s: f64,
}

/// Mean over all `b·d` entries of `(h_s·W − h_t·W)²`.
pub fn correction_loss(h_s: &Tensor, h_t: &Tensor, w_aux: &Tensor) -> Result<f64> {
    if h_s.dims() != h_t.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", h_s.dims(), h_t.dims())));
    }
    let diff = h_s.matmul(w_aux)?.sub(&h_t.matmul(w_aux)?)?;
    Ok(diff.data().iter().map(|v| v * v).sum::<f64>() / diff.len() as f64)
}

fn denominator(l_task_t: f64, l_task_s: f64) -> f64 {
    l_task_t + l_task_s + EPS_DEN
}

/// Shared by teacher and student.
pub fn latent_repr_loss(l_cor: f64, l_task_t: f64, l_task_s: f64) -> f64 {
    l_cor / denominator(l_task_t, l_task_s)
}

/// `Σ p·ln(max(p,ε)/max(q,ε))` for one probability row.
pub fn kl_div(p: &[f64], q: &[f64]) -> f64 {
    kl_row(p, q)
}

/// Row-mean KL divergence of two batch×C probability tensors.
pub fn kl_div_batch(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.dims() != q.dims() {
        return Err(Error::Shape(format!("{:?} vs {:?}", p.dims(), q.dims())));
    }
    let rows = p.rows();
    Ok((0..rows).map(|i| kl_row(p.row(i), q.row(i))).sum::<f64>() / rows as f64)
}

/// `(l_d_t, l_d_s)`: each model's KL to the other, divided by the task-loss sum.
pub fn bidir_distill_losses(probs_t: &Tensor, probs_s: &Tensor, l_task_t: f64, l_task_s: f64) -> Result<(f64, f64)> {
    let den = denominator(l_task_t, l_task_s);
    Ok((kl_div_batch(probs_t, probs_s)? / den, kl_div_batch(probs_s, probs_t)? / den))
}

/// Tape nodes for every loss of one distillation step.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    /// Correction loss with gradients into both backbones.
    pub l_cor: Var,
    pub l_task_t: Var,
    pub l_task_s: Var,
    /// `l_cor / den` with gradients into both backbones.
    pub l_lrl: Var,
    pub l_d_t: Var,
    pub l_d_s: Var,
    pub l_bik_t: Var,
    pub l_bik_s: Var,
    /// `l_bik_t + l_bik_s`; one sweep from here yields every update direction.
    pub total: Var,
}

impl LossVars {
    pub fn bundle(&self, tape: &Tape) -> LossBundle {
        LossBundle {
            l_cor: tape.scalar(self.l_cor),
            l_task_t: tape.scalar(self.l_task_t),
            l_task_s: tape.scalar(self.l_task_s),
            l_lrl: tape.scalar(self.l_lrl),
            l_d_t: tape.scalar(self.l_d_t),
            l_d_s: tape.scalar(self.l_d_s),
            l_bik_t: tape.scalar(self.l_bik_t),
            l_bik_s: tape.scalar(self.l_bik_s),
        }
    }
}

/// Records both forwards and all losses.
pub fn record_losses(
    tape: &mut Tape,
    teacher: &BoundModel,
    student: &BoundModel,
    w_aux: Var,
    batch: Var,
    labels: &[usize],
) -> Result<LossVars> {
    let t = teacher.forward(tape, batch)?;
    let s = student.forward(tape, batch)?;
    let d = tape.value(t.hidden).cols();
    if tape.value(w_aux).dims() != [d, d] {
        return Err(Error::Shape(format!("w_aux must be {d}x{d}")));
    }
    let l_task_t = tape.cross_entropy(t.probs, labels)?;
    let l_task_s = tape.cross_entropy(s.probs, labels)?;
    let inv_den = 1.0 / denominator(tape.scalar(l_task_t), tape.scalar(l_task_s));

    let hs_w = tape.matmul(s.hidden, w_aux)?;
    let ht_w = tape.matmul(t.hidden, w_aux)?;
    let gap = tape.sub(hs_w, ht_w)?;
    let l_cor = tape.mean_square(gap);
    let l_lrl = tape.scale(l_cor, inv_den);

    let hs_frozen = tape.detach(s.hidden);
    let ht_frozen = tape.detach(t.hidden);
    // teacher side: student hidden state frozen
    let hs_frozen_w = tape.matmul(hs_frozen, w_aux)?;
    let gap_t = tape.sub(hs_frozen_w, ht_w)?;
    let cor_t = tape.mean_square(gap_t);
    let lrl_t = tape.scale(cor_t, inv_den);
    // student side: teacher hidden state frozen
    let ht_frozen_w = tape.matmul(ht_frozen, w_aux)?;
    let gap_s = tape.sub(hs_w, ht_frozen_w)?;
    let cor_s = tape.mean_square(gap_s);
    let lrl_s = tape.scale(cor_s, inv_den);

    let ps_frozen = tape.detach(s.probs);
    let pt_frozen = tape.detach(t.probs);
    let kl_t = tape.kl_div(t.probs, ps_frozen)?;
    let kl_s = tape.kl_div(s.probs, pt_frozen)?;
    let l_d_t = tape.scale(kl_t, inv_den);
    let l_d_s = tape.scale(kl_s, inv_den);

    let dt = tape.add(l_d_t, lrl_t)?;
    let l_bik_t = tape.add(dt, l_task_t)?;
    let ds = tape.add(l_d_s, lrl_s)?;
    let l_bik_s = tape.add(ds, l_task_s)?;
    let total = tape.add(l_bik_t, l_bik_s)?;
    Ok(LossVars { l_cor, l_task_t, l_task_s, l_lrl, l_d_t, l_d_s, l_bik_t, l_bik_s, total })
}

/// Per-client local state. The teacher never leaves the client.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub client_id: usize,
    pub teacher: ModelParams,
    pub student: ModelParams,
    pub w_aux: Tensor,
    pub split: ClientSplit,
    pub rng: Rng,
}

impl ClientState {
    /// Teacher and student both start from `init`; `W_aux` starts near identity.
    pub fn new(client_id: usize, init: &ModelParams, split: ClientSplit, seed: u64) -> Self {
        let d = init.spec().hidden_width();
        let mut wrng = rng::derive(seed, &[rng::stream::W_AUX, client_id as u64]);
        let noise = Normal::new(0.0, W_AUX_INIT_STD).expect("valid std");
        let mut w_aux = Tensor::identity(d);
        for v in w_aux.data_mut() {
            *v += noise.sample(&mut wrng);
        }
        Self {
            client_id,
            teacher: init.clone(),
            student: init.clone(),
            w_aux,
            split,
            rng: rng::derive(seed, &[rng::stream::LOCAL, client_id as u64]),
        }
    }

    pub fn train_len(&self) -> usize {
        self.split.train.len()
    }

    /// Every loss for one batch at the current parameters.
    pub fn total_losses(&self, batch: &Tensor, labels: &[usize]) -> Result<LossBundle> {
        let mut tape = Tape::new();
        let teacher = BoundModel::bind(&mut tape, &self.teacher);
        let student = BoundModel::bind(&mut tape, &self.student);
        let w = tape.leaf(self.w_aux.clone());
        let x = tape.leaf(batch.clone());
        Ok(record_losses(&mut tape, &teacher, &student, w, x, labels)?.bundle(&tape))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
}

#[derive(Debug, Clone)]
pub struct LocalUpdateResult {
    /// Student parameters after the local phase minus the received global.
    pub delta: TensorMap,
    pub sample_count: usize,
    pub final_losses: LossBundle,
}

/// Draws a minibatch of distinct training indices.
pub fn draw_batch(train: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<usize> {
    let b = batch_size.min(train.len());
    index::sample(rng, train.len(), b).into_iter().map(|i| train[i]).collect()
}

/// One local phase. Returns `None` when the client has no training data.
pub fn local_update(
    state: &mut ClientState,
    data: &Dataset,
    global_student: &ModelParams,
    cfg: &LocalConfig,
) -> Result<Option<LocalUpdateResult>> {
    if cfg.steps == 0 {
        return Err(Error::Config("local steps must be >= 1".into()));
    }
    if state.split.train.is_empty() {
        return Ok(None);
    }
    state.student = global_student.clone();
    let mut last = LossBundle::default();
    for _ in 0..cfg.steps {
        let idx = draw_batch(&state.split.train, cfg.batch_size, &mut state.rng);
        let (x, y) = data.gather(&idx);
        let mut tape = Tape::new();
        let teacher = BoundModel::bind(&mut tape, &state.teacher);
        let student = BoundModel::bind(&mut tape, &state.student);
        let w = tape.leaf(state.w_aux.clone());
        let xv = tape.leaf(x);
        let losses = record_losses(&mut tape, &teacher, &student, w, xv, &y)?;
        last = losses.bundle(&tape);
        let grads = tape.backward(losses.total);
        state.teacher = sgd_step(&state.teacher, &teacher.grads(&grads), cfg.lr)?;
        state.student = sgd_step(&state.student, &student.grads(&grads), cfg.lr)?;
        let gw = grads.wrt(w);
        for (p, g) in state.w_aux.data_mut().iter_mut().zip(gw.data()) {
            *p -= cfg.lr * g;
        }
    }
    Ok(Some(LocalUpdateResult {
        delta: state.student.delta_from(global_student)?,
        sample_count: state.train_len(),
        final_losses: last,
    }))
}
