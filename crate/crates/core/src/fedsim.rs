//! Round orchestration: client sampling, local training, DP noise,
//! compressed transport, weighted aggregation and redistribution.
//!
//! The server only ever sees encoded [`CompressedUpdate`] bytes. It keeps
//! the global model in full precision and broadcasts each aggregated delta
//! through the same compression channel; clients hold what they can
//! reconstruct from those broadcasts.

use std::collections::BTreeSet;
use std::time::Instant;

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use crate::data::{gen_synthetic, load_dataset, partition_dirichlet, partition_pathological, Dataset, PartitionSpec};
use crate::dpd::wire::{decode, encode};
use crate::dpd::{compress_update, decompress_update, sum_log_prob, CompressedUpdate, DpdConfig, DpdMode, LikelihoodEval};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::exp::config::{DatasetKind, ExperimentConfig, PartitionKind, Strategy};
use crate::nn::{accuracy, build_model, forward, sgd_step, BoundModel, ModelKind, ModelParams, ModelSpec, Tape, TensorMap};
use crate::rng::{self, stream, Rng};
use crate::synkd::{draw_batch, local_update, ClientState, LocalConfig, LossBundle};

/// `max(1, round(ratio·N))` distinct clients, ascending.
pub fn sample_clients(n: usize, ratio: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    if n == 0 {
        return Err(Error::Config("need at least one client".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Config(format!("participation ratio must be in (0, 1], got {ratio}")));
    }
    let k = ((ratio * n as f64).round() as usize).clamp(1, n);
    let mut ids = index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    Ok(ids)
}

/// Adds zero-mean Gaussian noise with standard deviation `tau` to every entry.
pub fn apply_dp_noise(delta: &TensorMap, tau: f64, rng: &mut Rng) -> Result<TensorMap> {
    if !(tau >= 0.0 && tau.is_finite()) {
        return Err(Error::Config(format!("dp tau must be >= 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(delta.clone());
    }
    let normal = Normal::new(0.0, tau).expect("finite positive std");
    let mut out = delta.clone();
    for t in out.values_mut() {
        for v in t.data_mut() {
            *v += normal.sample(rng);
        }
    }
    Ok(out)
}

/// Sample-weighted mean of client deltas, summed in ascending client id.
pub fn aggregate(updates: &[(u32, TensorMap, u64)]) -> Result<TensorMap> {
    let mut order: Vec<&(u32, TensorMap, u64)> = updates.iter().collect();
    order.sort_by_key(|u| u.0);
    let first = order.first().ok_or_else(|| Error::Protocol("no updates to aggregate".into()))?;
    for u in &order[1..] {
        let same = u.1.len() == first.1.len()
            && u.1.iter().zip(&first.1).all(|((ka, a), (kb, b))| ka == kb && a.dims() == b.dims());
        if !same {
            return Err(Error::Protocol(format!("update from client {} has a different layout", u.0)));
        }
    }
    let total: u64 = order.iter().map(|u| u.2).sum();
    let weights: Vec<f64> = if total == 0 {
        vec![1.0 / order.len() as f64; order.len()]
    } else {
        order.iter().map(|u| u.2 as f64 / total as f64).collect()
    };
    let mut out: TensorMap = first.1.iter().map(|(k, t)| (k.clone(), t.scale(0.0))).collect();
    for (u, w) in order.iter().zip(&weights) {
        for (acc, t) in out.values_mut().zip(u.1.values()) {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += w * v;
            }
        }
    }
    Ok(out)
}

/// Calibration log-likelihood around the parameters a client received.
pub struct CalibrationEvaluator<'a> {
    pub base: &'a ModelParams,
    pub batch: crate::tensor::Tensor,
    pub labels: Vec<usize>,
}

impl LikelihoodEval for CalibrationEvaluator<'_> {
    fn log_likelihood(&self, delta: &TensorMap) -> Result<f64> {
        let theta = self.base.plus(delta)?;
        let out = forward(&theta, &self.batch)?;
        Ok(sum_log_prob(&out.probs, &self.labels))
    }
}

/// Task-loss-only SGD used by the baselines. Returns the final batch loss.
pub fn task_update(
    model: &ModelParams,
    data: &Dataset,
    train: &[usize],
    cfg: &LocalConfig,
    rng: &mut Rng,
) -> Result<(ModelParams, f64)> {
    let mut params = model.clone();
    let mut last = 0.0;
    for _ in 0..cfg.steps {
        let idx = draw_batch(train, cfg.batch_size, rng);
        let (x, y) = data.gather(&idx);
        let mut tape = Tape::new();
        let m = BoundModel::bind(&mut tape, &params);
        let xv = tape.leaf(x);
        let out = m.forward(&mut tape, xv)?;
        let loss = tape.cross_entropy(out.probs, &y)?;
        last = tape.scalar(loss);
        let grads = tape.backward(loss);
        params = sgd_step(&params, &m.grads(&grads), cfg.lr)?;
    }
    Ok((params, last))
}

#[derive(Debug, Clone)]
pub struct ServerOutcome {
    pub accepted: Vec<u32>,
    /// Position in the upload list and the reason it was rejected.
    pub rejected: Vec<(usize, String)>,
    pub broadcast: Option<Vec<u8>>,
    pub downlink_floats: usize,
    pub downlink_full_floats: usize,
}

#[derive(Debug, Clone)]
pub struct ServerState {
    global: ModelParams,
    client_view: ModelParams,
    round_index: usize,
    dpd: DpdConfig,
    downlink_compress: bool,
}

impl ServerState {
    pub fn new(init: ModelParams, dpd: DpdConfig, downlink_compress: bool) -> Self {
        Self { client_view: init.clone(), global: init, round_index: 0, dpd, downlink_compress }
    }

    pub fn global(&self) -> &ModelParams {
        &self.global
    }

    /// What clients hold after applying every broadcast so far.
    pub fn client_view(&self) -> &ModelParams {
        &self.client_view
    }

    pub fn round_index(&self) -> usize {
        self.round_index
    }

    fn downlink_config(&self) -> DpdConfig {
        let mode = if self.downlink_compress && self.dpd.mode != DpdMode::Full {
            DpdMode::VarianceOnly
        } else {
            DpdMode::Full
        };
        DpdConfig { mode, ..self.dpd }
    }

    /// Decodes, aggregates and applies one round of uploads, then encodes the
    /// broadcast. Undecodable uploads are dropped; with no survivors the
    /// global model is left unchanged.
    pub fn receive_round(&mut self, uploads: &[Vec<u8>]) -> Result<ServerOutcome> {
        self.round_index += 1;
        let mut decoded = Vec::new();
        let mut rejected = Vec::new();
        for (pos, bytes) in uploads.iter().enumerate() {
            match decode(bytes).map_err(Error::from).and_then(|c| Ok((c.client_id, decompress_update(&c)?, c.sample_count))) {
                Ok(u) => decoded.push(u),
                Err(e) => rejected.push((pos, e.to_string())),
            }
        }
        if decoded.is_empty() {
            return Ok(ServerOutcome { accepted: vec![], rejected, broadcast: None, downlink_floats: 0, downlink_full_floats: 0 });
        }
        let accepted = decoded.iter().map(|u| u.0).collect();
        let agg = aggregate(&decoded)?;
        self.global = self.global.plus(&agg)?;

        let cfg = self.downlink_config();
        let msg = compress_update(u32::MAX, 0, &agg, &cfg, None)?;
        let bytes = encode(&msg).map_err(|e| Error::Protocol(e.to_string()))?;
        self.client_view = apply_broadcast(&self.client_view, &bytes)?;
        Ok(ServerOutcome {
            accepted,
            rejected,
            downlink_floats: msg.uploaded_float_count(),
            downlink_full_floats: msg.full_float_count(),
            broadcast: Some(bytes),
        })
    }
}

/// Client-side reconstruction of a server broadcast.
pub fn apply_broadcast(view: &ModelParams, bytes: &[u8]) -> Result<ModelParams> {
    let c: CompressedUpdate = decode(bytes)?;
    view.plus(&decompress_update(&c)?)
}

#[derive(Debug, Clone, Serialize)]
pub struct ClientRoundStats {
    pub client_id: usize,
    pub test_accuracy: Option<f64>,
    pub l_bik_t: Option<f64>,
    pub l_bik_s: Option<f64>,
    pub uploaded_floats: usize,
    pub full_floats: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct RoundReport {
    pub round: usize,
    pub participants: Vec<usize>,
    pub dropped: Vec<(usize, String)>,
    pub skipped: Vec<usize>,
    pub clients: Vec<ClientRoundStats>,
    pub mean_accuracy: f64,
    pub uploaded_floats: usize,
    pub full_floats: usize,
    pub downlink_floats: usize,
    pub downlink_full_floats: usize,
    pub wall_ms: f64,
}

impl RoundReport {
    /// Uploaded over uncompressed floats; `None` when nothing was sent.
    pub fn compression_ratio(&self) -> Option<f64> {
        (self.full_floats > 0).then(|| self.uploaded_floats as f64 / self.full_floats as f64)
    }
}

struct ClientOutput {
    client_id: usize,
    upload: Option<(Vec<u8>, usize, usize)>,
    losses: Option<LossBundle>,
    task_loss: Option<f64>,
}

enum ClientResult {
    Done(ClientOutput),
    Skipped(usize),
    Failed(usize, String),
}

/// A complete single-process federation.
pub struct Simulation {
    cfg: ExperimentConfig,
    data: Dataset,
    partition: PartitionSpec,
    clients: Vec<ClientState>,
    server: ServerState,
    last_uploads: Vec<Vec<u8>>,
    round: usize,
    exec: Executor,
}

pub fn model_spec_for(cfg: &ExperimentConfig, data: &Dataset) -> Result<ModelSpec> {
    let dims = data.sample_dims();
    let spec = match cfg.model.kind {
        ModelKind::Mlp => ModelSpec::mlp(dims.iter().product(), cfg.model.hidden, data.num_classes()),
        ModelKind::SmallCnn => {
            let d: [usize; 3] = dims
                .try_into()
                .map_err(|_| Error::Config(format!("smallcnn needs (channels, height, width) samples, got {dims:?}")))?;
            ModelSpec::small_cnn(d, cfg.model.channels, cfg.model.hidden, data.num_classes())
        }
    };
    spec.validate()?;
    Ok(spec)
}

pub fn load_data(cfg: &ExperimentConfig) -> Result<Dataset> {
    match cfg.dataset.kind {
        DatasetKind::Synthetic => gen_synthetic(&cfg.dataset.synthetic, &mut rng::derive(cfg.seed, &[stream::DATASET])),
        DatasetKind::File => {
            let path = cfg.dataset.path.as_ref().ok_or_else(|| Error::Config("dataset path missing".into()))?;
            Ok(load_dataset(path)?)
        }
    }
}

impl Simulation {
    pub fn new(cfg: ExperimentConfig, exec: Executor) -> Result<Self> {
        cfg.validate()?;
        let data = load_data(&cfg)?;
        let spec = model_spec_for(&cfg, &data)?;
        let mut prng = rng::derive(cfg.seed, &[stream::PARTITION]);
        let assignment = match cfg.partition.kind {
            PartitionKind::Pathological => {
                partition_pathological(&data, cfg.clients, cfg.partition.classes_per_client, &mut prng)?
            }
            PartitionKind::Dirichlet => partition_dirichlet(&data, cfg.clients, cfg.partition.lambda, None, &mut prng)?,
        };
        let partition = PartitionSpec::from_assignment(assignment, &mut rng::derive(cfg.seed, &[stream::PARTITION, 1]));
        let init = build_model(&spec, &mut rng::derive(cfg.seed, &[stream::MODEL_INIT]))?;
        let clients = partition
            .clients
            .iter()
            .enumerate()
            .map(|(i, split)| ClientState::new(i, &init, split.clone(), cfg.seed))
            .collect();
        let server = ServerState::new(init, cfg.dpd, cfg.downlink_compress);
        Ok(Self {
            cfg,
            data,
            partition,
            clients,
            server,
            last_uploads: Vec::new(),
            round: 0,
            exec,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    pub fn partition(&self) -> &PartitionSpec {
        &self.partition
    }

    pub fn clients(&self) -> &[ClientState] {
        &self.clients
    }

    pub fn server(&self) -> &ServerState {
        &self.server
    }

    /// Encoded uploads of the most recent round, in client-id order.
    pub fn last_uploads(&self) -> &[Vec<u8>] {
        &self.last_uploads
    }

    /// The model client `c` uses for inference.
    pub fn inference_model(&self, c: usize) -> &ModelParams {
        match self.cfg.strategy {
            Strategy::Local | Strategy::Prfl => &self.clients[c].student,
            Strategy::FedAvg => self.server.client_view(),
        }
    }

    /// Test accuracy of every client's inference model; `None` without test data.
    pub fn evaluate(&self) -> Result<Vec<Option<f64>>> {
        let ids: Vec<usize> = (0..self.clients.len()).collect();
        self.exec
            .map(&ids, |&c| {
                let test = &self.clients[c].split.test;
                if test.is_empty() {
                    return Ok(None);
                }
                let (x, y) = self.data.gather(test);
                let out = forward(self.inference_model(c), &x)?;
                Ok(Some(accuracy(&out.probs, &y)))
            })
            .into_iter()
            .collect()
    }

    fn report(&self, participants: Vec<usize>, outputs: &[ClientOutput], evals: Vec<Option<f64>>) -> RoundReport {
        let clients: Vec<ClientRoundStats> = evals
            .iter()
            .enumerate()
            .map(|(c, acc)| {
                let out = outputs.iter().find(|o| o.client_id == c);
                let (up, full) = out.and_then(|o| o.upload.as_ref()).map_or((0, 0), |u| (u.1, u.2));
                ClientRoundStats {
                    client_id: c,
                    test_accuracy: *acc,
                    l_bik_t: out.and_then(|o| o.losses.map(|l| l.l_bik_t)),
                    l_bik_s: out.and_then(|o| o.losses.map(|l| l.l_bik_s).or(o.task_loss)),
                    uploaded_floats: up,
                    full_floats: full,
                }
            })
            .collect();
        let accs: Vec<f64> = evals.iter().flatten().copied().collect();
        let mean_accuracy = if accs.is_empty() { 0.0 } else { accs.iter().sum::<f64>() / accs.len() as f64 };
        RoundReport {
            round: self.round,
            participants,
            dropped: Vec::new(),
            skipped: Vec::new(),
            uploaded_floats: clients.iter().map(|c| c.uploaded_floats).sum(),
            full_floats: clients.iter().map(|c| c.full_floats).sum(),
            clients,
            mean_accuracy,
            downlink_floats: 0,
            downlink_full_floats: 0,
            wall_ms: 0.0,
        }
    }

    /// Evaluation of the initial state, reported as round 0.
    pub fn initial_report(&self) -> Result<RoundReport> {
        Ok(self.report(Vec::new(), &[], self.evaluate()?))
    }

    pub fn run_round(&mut self) -> Result<RoundReport> {
        let started = Instant::now();
        self.round += 1;
        let round = self.round;
        let cfg = &self.cfg;
        let participants =
            sample_clients(cfg.clients, cfg.participation_ratio, &mut rng::derive(cfg.seed, &[stream::SAMPLING, round as u64]))?;
        let chosen: BTreeSet<usize> = participants.iter().copied().collect();
        let local = LocalConfig { steps: cfg.local_steps, lr: cfg.lr, batch_size: cfg.batch_size };
        let view = self.server.client_view();
        let data = &self.data;

        let mut active: Vec<&mut ClientState> =
            self.clients.iter_mut().filter(|c| chosen.contains(&c.client_id)).collect();
        let results = self.exec.map_mut(&mut active, |c| {
            match client_round(cfg, c, data, view, &local, round) {
                Ok(Some(out)) => ClientResult::Done(out),
                Ok(None) => ClientResult::Skipped(c.client_id),
                Err(e) => ClientResult::Failed(c.client_id, e.to_string()),
            }
        });

        let mut outputs = Vec::new();
        let mut dropped = Vec::new();
        let mut skipped = Vec::new();
        for r in results {
            match r {
                ClientResult::Done(o) => outputs.push(o),
                ClientResult::Skipped(id) => skipped.push(id),
                ClientResult::Failed(id, why) => {
                    log::warn!("round {round}: client {id} dropped: {why}");
                    dropped.push((id, why));
                }
            }
        }

        let uploads: Vec<Vec<u8>> = outputs.iter().filter_map(|o| o.upload.as_ref().map(|u| u.0.clone())).collect();
        let uploaders: Vec<usize> = outputs.iter().filter(|o| o.upload.is_some()).map(|o| o.client_id).collect();
        let mut downlink = (0, 0);
        if cfg.strategy != Strategy::Local {
            let outcome = self.server.receive_round(&uploads)?;
            for (pos, why) in outcome.rejected {
                dropped.push((uploaders[pos], why));
            }
            downlink = (outcome.downlink_floats, outcome.downlink_full_floats);
        }
        self.last_uploads = uploads;

        let evals = self.evaluate()?;
        let mut report = self.report(participants, &outputs, evals);
        dropped.sort();
        report.dropped = dropped;
        report.skipped = skipped;
        report.downlink_floats = downlink.0;
        report.downlink_full_floats = downlink.1;
        report.wall_ms = started.elapsed().as_secs_f64() * 1e3;
        Ok(report)
    }
}

fn client_round(
    cfg: &ExperimentConfig,
    c: &mut ClientState,
    data: &Dataset,
    view: &ModelParams,
    local: &LocalConfig,
    round: usize,
) -> Result<Option<ClientOutput>> {
    let id = c.client_id;
    if c.split.train.is_empty() {
        return Ok(None);
    }
    let tag = |s: u64| rng::derive(cfg.seed, &[s, round as u64, id as u64]);
    let (delta, losses, task_loss) = match cfg.strategy {
        Strategy::Local => {
            let (model, loss) = task_update(&c.student, data, &c.split.train, local, &mut c.rng)?;
            c.student = model;
            return Ok(Some(ClientOutput { client_id: id, upload: None, losses: None, task_loss: Some(loss) }));
        }
        Strategy::FedAvg => {
            let (model, loss) = task_update(view, data, &c.split.train, local, &mut c.rng)?;
            let delta = model.delta_from(view)?;
            c.student = model;
            (delta, None, Some(loss))
        }
        Strategy::Prfl => match local_update(c, data, view, local)? {
            Some(r) => (r.delta, Some(r.final_losses), None),
            None => return Ok(None),
        },
    };
    let delta = apply_dp_noise(&delta, cfg.dp_tau, &mut tag(stream::DP_NOISE))?;
    let n = c.split.train.len() as u64;
    let msg = match cfg.strategy {
        Strategy::Prfl => {
            let idx = draw_batch(&c.split.train, cfg.dpd.calib_size, &mut tag(stream::CALIBRATION));
            let (x, y) = data.gather(&idx);
            let eval = CalibrationEvaluator { base: view, batch: x, labels: y };
match compress_update(id as u32, n, &delta, &cfg.dpd, Some(&eval)) {
                Ok(c) => c,
                Err(e @ Error::Compression(_)) => {
                    log::warn!("client {id}: {e}; sending a raw update");
                    CompressedUpdate::raw(id as u32, n, &delta)
                }
                Err(e) => return Err(e),
            }
        }
        _ => CompressedUpdate::raw(id as u32, n, &delta),
    };
    let bytes = encode(&msg).map_err(|e| Error::Protocol(e.to_string()))?;
    Ok(Some(ClientOutput {
        client_id: id,
        upload: Some((bytes, msg.uploaded_float_count(), msg.full_float_count())),
        losses,
        task_loss,
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentOutcome {
    /// Round 0 (initial evaluation) followed by every trained round.
    pub rounds: Vec<RoundReport>,
}

impl ExperimentOutcome {
    pub fn final_mean_accuracy(&self) -> f64 {
        self.rounds.last().map_or(0.0, |r| r.mean_accuracy)
    }
}

pub fn run_experiment(cfg: &ExperimentConfig, exec: Executor) -> Result<ExperimentOutcome> {
    let mut sim = Simulation::new(cfg.clone(), exec)?;
    let mut rounds = vec![sim.initial_report()?];
    for _ in 0..cfg.rounds {
        let r = sim.run_round()?;
        log::info!(
            "round {:>3}: mean acc {:.4}, uploaded {}/{} floats",
            r.round,
            r.mean_accuracy,
            r.uploaded_floats,
            r.full_floats
        );
        rounds.push(r);
    }
    Ok(ExperimentOutcome { rounds })
}
