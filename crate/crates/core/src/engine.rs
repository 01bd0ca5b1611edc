//! Round orchestration for sequential federated learning with multi-teacher
//! distillation, plus the FedSeq and FedAvg baselines.
//!
//! Within a round the sampled clients train one after another, each starting
//! from the model its predecessor produced. Every client's end-of-training
//! model is kept; at the next round a subset of them, chosen so that their
//! clients' pooled class distribution is close to uniform, acts as the
//! teacher ensemble.

use std::fmt;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{class_distribution, ClassDistribution, Dataset};
use crate::distill::{total_loss, KdConfig, Metric, TeacherEnsemble};
use crate::error::{arg, non_negative, positive, Error, Result};
use crate::metrics::{evaluate, evaluation_consistency, forgetting_measure, EvalTrace, Evaluation};
use crate::model::{weighted_average, ModelParams};
use crate::rng::{derive_seed, derived_rng, rng_from_seed, Stream};
use crate::selection::{greedy_select, random_select, SelectionInstance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Sequential training with greedily selected teachers.
    Sfedkd,
    /// Plain sequential training with cross-entropy.
    Fedseq,
    /// Parallel training with size-weighted parameter averaging.
    Fedavg,
    /// Sequential training with uniformly sampled teachers.
    SfedkdRandomTeachers,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Sfedkd => "sfedkd",
            Mode::Fedseq => "fedseq",
            Mode::Fedavg => "fedavg",
            Mode::SfedkdRandomTeachers => "sfedkd_random_teachers",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sfedkd" => Ok(Mode::Sfedkd),
            "fedseq" => Ok(Mode::Fedseq),
            "fedavg" => Ok(Mode::Fedavg),
            "sfedkd_random_teachers" => Ok(Mode::SfedkdRandomTeachers),
            other => arg(format!("unknown mode `{other}`")),
        }
    }
}

/// Federated training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Clients sampled per round.
    #[serde(rename = "M")]
    pub clients_per_round: usize,
    /// Teachers per round.
    #[serde(rename = "K")]
    pub teachers: usize,
    #[serde(rename = "R")]
    pub rounds: usize,
    /// Local epochs.
    #[serde(rename = "E")]
    pub local_epochs: usize,
    pub batch_size: usize,
    pub eta: f64,
    pub weight_decay: f64,
    pub kd: KdConfig,
    pub mode: Mode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            clients_per_round: 10,
            teachers: 5,
            rounds: 1000,
            local_epochs: 5,
            batch_size: 64,
            eta: 0.01,
            weight_decay: 1e-4,
            kd: KdConfig::default(),
            mode: Mode::Sfedkd,
        }
    }
}

impl TrainConfig {
    /// Checks invariants; errors name the offending field path.
    pub fn validate(&self, prefix: &str) -> Result<()> {
        let bad = |field: &str, msg: String| {
            Err(Error::Config {
                path: format!("{prefix}{field}"),
                msg,
            })
        };
        if self.clients_per_round == 0 {
            return bad("M", "at least one client per round".into());
        }
        if self.teachers == 0 || self.teachers > self.clients_per_round {
            return bad(
                "K",
                format!(
                    "must lie in [1, M = {}], got {}",
                    self.clients_per_round, self.teachers
                ),
            );
        }
        if self.rounds == 0 {
            return bad("R", "at least one round".into());
        }
        if self.local_epochs == 0 {
            return bad("E", "at least one local epoch".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !positive(self.eta) {
            return bad("eta", "must be positive".into());
        }
        if !non_negative(self.weight_decay) {
            return bad("weight_decay", "must be non-negative".into());
        }
        if !positive(self.kd.tau) {
            return bad("kd.tau", "must be positive".into());
        }
        if !positive(self.kd.epsilon) {
            return bad("kd.epsilon", "must be positive".into());
        }
        if !non_negative(self.kd.gamma) {
            return bad("kd.gamma", "must be non-negative".into());
        }
        if !non_negative(self.kd.beta) {
            return bad("kd.beta", "must be non-negative".into());
        }
        Ok(())
    }
}

/// Simulation state carried from round to round.
#[derive(Debug, Clone)]
pub struct FederationState {
    /// Index of the next round to run, starting at 1.
    pub round: usize,
    pub global_model: ModelParams,
    pub prev_sequence: Vec<usize>,
    /// End-of-training model of each position in `prev_sequence`.
    pub prev_models: Vec<ModelParams>,
    pub clients: Vec<Dataset>,
    pub client_dists: Vec<ClassDistribution>,
    pub master_seed: u64,
}

impl FederationState {
    pub fn new(
        initial_model: ModelParams,
        clients: Vec<Dataset>,
        master_seed: u64,
    ) -> Result<Self> {
        if clients.is_empty() {
            return arg("federation needs at least one client");
        }
        let c = initial_model.num_classes();
        let f = initial_model.input_dim();
        if let Some(bad) = clients
            .iter()
            .find(|d| d.num_classes() != c || d.dim() != f)
        {
            return arg(format!(
                "client dataset `{}` does not match the model shape ({} features, {} classes)",
                bad.name, f, c
            ));
        }
        let client_dists = clients.iter().map(|d| class_distribution(d, c)).collect();
        Ok(Self {
            round: 1,
            global_model: initial_model,
            prev_sequence: Vec::new(),
            prev_models: Vec::new(),
            clients,
            client_dists,
            master_seed,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.clients.len()
    }

    fn shuffle_seed(&self, position: usize) -> u64 {
        derive_seed(
            self.master_seed,
            Stream::Shuffle,
            &[self.round as u64, position as u64],
        )
    }
}

/// Ordered `M`-subset of clients for the current round, uniformly at random.
pub fn sample_sequence(state: &FederationState, m: usize) -> Result<Vec<usize>> {
    let n = state.num_clients();
    if m > n {
        return arg(format!("cannot sample {m} of {n} clients"));
    }
    let mut rng = derived_rng(state.master_seed, Stream::Sequence, &[state.round as u64]);
    let mut all: Vec<usize> = (0..n).collect();
    let (seq, _) = all.partial_shuffle(&mut rng, m);
    Ok(seq.to_vec())
}

/// Positions of the previous round whose client holds data.
fn teacher_candidates(state: &FederationState) -> Vec<usize> {
    state
        .prev_sequence
        .iter()
        .enumerate()
        .filter(|(_, &c)| !state.clients[c].is_empty())
        .map(|(pos, _)| pos)
        .collect()
}

fn ensemble_from_positions(
    state: &FederationState,
    positions: &[usize],
) -> Result<TeacherEnsemble> {
    TeacherEnsemble::new(
        positions
            .iter()
            .map(|&p| state.prev_models[p].snapshot())
            .collect(),
        positions
            .iter()
            .map(|&p| state.client_dists[state.prev_sequence[p]].clone())
            .collect(),
        positions.iter().map(|&p| state.prev_sequence[p]).collect(),
    )
}

/// Greedy teacher selection over the previous round's models, empty in the
/// first round. Clients without data are not eligible; if fewer than `k`
/// remain, all of them are used.
pub fn collect_teachers(
    state: &FederationState,
    k: usize,
    metric: Metric,
) -> Result<TeacherEnsemble> {
    if state.round <= 1 || state.prev_models.is_empty() {
        return Ok(TeacherEnsemble::empty());
    }
    let candidates = teacher_candidates(state);
    if candidates.is_empty() || k == 0 {
        return Ok(TeacherEnsemble::empty());
    }
    let inst = SelectionInstance::new(
        candidates
            .iter()
            .map(|&p| state.client_dists[state.prev_sequence[p]].clone())
            .collect(),
        k.min(candidates.len()),
        metric,
    )?;
    let chosen = greedy_select(&inst)?;
    let positions: Vec<usize> = chosen.indices.iter().map(|&i| candidates[i]).collect();
    ensemble_from_positions(state, &positions)
}

/// Uniformly sampled teachers, the baseline for greedy selection.
pub fn collect_random_teachers(state: &FederationState, k: usize) -> Result<TeacherEnsemble> {
    if state.round <= 1 || state.prev_models.is_empty() {
        return Ok(TeacherEnsemble::empty());
    }
    let candidates = teacher_candidates(state);
    if candidates.is_empty() || k == 0 {
        return Ok(TeacherEnsemble::empty());
    }
    let seed = derive_seed(
        state.master_seed,
        Stream::RandomTeachers,
        &[state.round as u64],
    );
    let picks = random_select(candidates.len(), k.min(candidates.len()), seed)?;
    let positions: Vec<usize> = picks.iter().map(|&i| candidates[i]).collect();
    ensemble_from_positions(state, &positions)
}

/// Result of training on one client.
#[derive(Debug, Clone)]
pub struct LocalOutcome {
    pub model: ModelParams,
    /// Total loss evaluated before each SGD step.
    pub step_losses: Vec<f64>,
}

/// `E` epochs of mini-batch SGD on `total_loss`. Each epoch reshuffles the
/// client data from its own derived stream; the last partial batch is kept.
/// The ensemble's weights must already be set for this client.
pub fn local_train(
    model: &ModelParams,
    client: &Dataset,
    ensemble: Option<&TeacherEnsemble>,
    cfg: &TrainConfig,
    shuffle_seed: u64,
) -> Result<LocalOutcome> {
    if client.is_empty() {
        return arg("cannot train on an empty client");
    }
    if cfg.local_epochs == 0 || cfg.batch_size == 0 {
        return arg("local epochs and batch size must be positive");
    }
    let mut model = model.clone();
    let dim = client.dim();
    let mut order: Vec<usize> = (0..client.len()).collect();
    let steps_per_epoch = client.len().div_ceil(cfg.batch_size);
    let mut step_losses = Vec::with_capacity(cfg.local_epochs * steps_per_epoch);
    let mut xs = Vec::with_capacity(cfg.batch_size * dim);
    let mut ys = Vec::with_capacity(cfg.batch_size);
    for epoch in 0..cfg.local_epochs {
        let mut rng = rng_from_seed(derive_seed(shuffle_seed, Stream::Shuffle, &[epoch as u64]));
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            xs.clear();
            ys.clear();
            for &i in batch {
                xs.extend_from_slice(client.sample(i));
                ys.push(client.labels()[i]);
            }
            let out = total_loss(&model, &xs, &ys, ensemble, &cfg.kd)?;
            step_losses.push(out.loss);
            model.apply_sgd(&out.grads, cfg.eta, cfg.weight_decay)?;
        }
    }
    Ok(LocalOutcome { model, step_losses })
}

/// When evaluation checkpoints are taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    Round,
    /// After every client, as in a per-client forgetting analysis.
    Client,
}

/// Evaluates checkpoints against a fixed dataset and keeps the trace.
#[derive(Debug, Clone)]
pub struct Monitor {
    pub eval_set: Option<Dataset>,
    pub granularity: Granularity,
    pub trace: EvalTrace,
    last: Option<Evaluation>,
    pending_consistency: Vec<f64>,
}

impl Monitor {
    pub fn new(eval_set: Option<Dataset>, granularity: Granularity) -> Self {
        Self {
            eval_set,
            granularity,
            trace: EvalTrace::default(),
            last: None,
            pending_consistency: Vec::new(),
        }
    }

    /// No evaluation at all.
    pub fn disabled() -> Self {
        Self::new(None, Granularity::Round)
    }

    fn observe(&mut self, tag: String, model: &ModelParams) -> Result<Option<Evaluation>> {
        let Some(set) = &self.eval_set else {
            return Ok(None);
        };
        let ev = evaluate(model, set)?;
        if let Some(prev) = &self.last {
            self.pending_consistency
                .push(evaluation_consistency(prev, &ev)?.value);
        }
        self.trace.push(tag, &ev);
        self.last = Some(ev.clone());
        Ok(Some(ev))
    }

    fn client_checkpoint(
        &mut self,
        round: usize,
        position: usize,
        model: &ModelParams,
    ) -> Result<()> {
        if self.granularity == Granularity::Client {
            self.observe(format!("r{round}c{position}"), model)?;
        }
        Ok(())
    }

    /// Closes a round: takes the round checkpoint (unless per-client
    /// checkpoints already covered it) and fills the record's metrics.
    fn finish_round(&mut self, record: &mut RoundRecord, model: &ModelParams) -> Result<()> {
        if self.eval_set.is_none() {
            return Ok(());
        }
        let ev = match self.granularity {
            Granularity::Round => self.observe(format!("r{}", record.round), model)?,
            Granularity::Client => match &self.last {
                Some(last) if record.trained.last().is_some() => Some(last.clone()),
                _ => self.observe(format!("r{}", record.round), model)?,
            },
        };
        if let Some(ev) = ev {
            record.top1 = Some(ev.top1);
            record.classwise = Some(ev.classwise);
        }
        if !self.pending_consistency.is_empty() {
            let n = self.pending_consistency.len() as f64;
            record.consistency = Some(self.pending_consistency.iter().sum::<f64>() / n);
        }
        self.pending_consistency.clear();
        if self.trace.len() >= 2 {
            record.forgetting = Some(forgetting_measure(&self.trace)?);
        }
        Ok(())
    }
}

/// Per-round log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub mode: Mode,
    /// Sampled client order.
    pub sequence: Vec<usize>,
    /// Sampled clients that held data and were trained.
    pub trained: Vec<usize>,
    /// Teacher client ids in selection order.
    pub teachers: Vec<usize>,
    /// Per-teacher NCKD weight averaged over the round's students.
    pub teacher_g_mean: Vec<f64>,
    /// Per-teacher TCKD weight averaged over the round's students.
    pub teacher_h_mean: Vec<f64>,
    pub mean_loss: Option<f64>,
    pub top1: Option<f64>,
    pub classwise: Option<Vec<Option<f64>>>,
    /// Mean cosine similarity of consecutive class-wise accuracy vectors
    /// recorded during this round.
    pub consistency: Option<f64>,
    /// Forgetting measure over all checkpoints so far.
    pub forgetting: Option<f64>,
    pub warning: Option<String>,
}

impl RoundRecord {
    fn new(round: usize, mode: Mode, sequence: Vec<usize>) -> Self {
        Self {
            round,
            mode,
            sequence,
            trained: Vec::new(),
            teachers: Vec::new(),
            teacher_g_mean: Vec::new(),
            teacher_h_mean: Vec::new(),
            mean_loss: None,
            top1: None,
            classwise: None,
            consistency: None,
            forgetting: None,
            warning: None,
        }
    }
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// One sequential round (sfedkd, sfedkd_random_teachers or fedseq).
pub fn run_round(
    state: &mut FederationState,
    cfg: &TrainConfig,
    monitor: &mut Monitor,
) -> Result<RoundRecord> {
    if cfg.mode == Mode::Fedavg {
        return fedavg_round(state, cfg, monitor);
    }
    let sequence = sample_sequence(state, cfg.clients_per_round)?;
    let mut ensemble = match cfg.mode {
        Mode::Sfedkd => collect_teachers(state, cfg.teachers, cfg.kd.metric)?,
        Mode::SfedkdRandomTeachers => collect_random_teachers(state, cfg.teachers)?,
        Mode::Fedseq | Mode::Fedavg => TeacherEnsemble::empty(),
    };
    let mut record = RoundRecord::new(state.round, cfg.mode, sequence.clone());
    record.teachers = ensemble.clients.clone();
    let k = ensemble.len();
    let mut g_sum = vec![0.0; k];
    let mut h_sum = vec![0.0; k];
    let mut losses = Vec::new();

    let mut model = state.global_model.clone();
    let mut snapshots = Vec::with_capacity(sequence.len());
    for (pos, &client) in sequence.iter().enumerate() {
        let data = &state.clients[client];
        if data.is_empty() {
            snapshots.push(model.snapshot());
            continue;
        }
        ensemble.reweight(&state.client_dists[client], &cfg.kd)?;
        for (s, v) in g_sum.iter_mut().zip(&ensemble.g) {
            *s += v;
        }
        for (s, v) in h_sum.iter_mut().zip(&ensemble.h) {
            *s += v;
        }
        let teachers = (!ensemble.is_empty()).then_some(&ensemble);
        let out = local_train(&model, data, teachers, cfg, state.shuffle_seed(pos))?;
        losses.extend_from_slice(&out.step_losses);
        model = out.model;
        snapshots.push(model.snapshot());
        record.trained.push(client);
        monitor.client_checkpoint(state.round, pos, &model)?;
    }

    let students = record.trained.len() as f64;
    if students > 0.0 {
        record.teacher_g_mean = g_sum.iter().map(|v| v / students).collect();
        record.teacher_h_mean = h_sum.iter().map(|v| v / students).collect();
    }
    record.mean_loss = mean(&losses);
    if record.trained.is_empty() {
        record.warning = Some("every sampled client was empty".into());
    }

    state.global_model = model;
    state.prev_sequence = sequence;
    state.prev_models = snapshots;
    monitor.finish_round(&mut record, &state.global_model)?;
    state.round += 1;
    Ok(record)
}

/// FedAvg round: every sampled client trains a copy of the global model with
/// cross-entropy; the server averages the results weighted by dataset size.
pub fn fedavg_round(
    state: &mut FederationState,
    cfg: &TrainConfig,
    monitor: &mut Monitor,
) -> Result<RoundRecord> {
    let sequence = sample_sequence(state, cfg.clients_per_round)?;
    let mut record = RoundRecord::new(state.round, Mode::Fedavg, sequence.clone());
    let plain = TrainConfig {
        kd: KdConfig {
            gamma: 0.0,
            beta: 0.0,
            ..cfg.kd
        },
        ..cfg.clone()
    };
    let global = &state.global_model;
    let outcomes = sequence
        .par_iter()
        .enumerate()
        .map(|(pos, &client)| {
            let data = &state.clients[client];
            if data.is_empty() {
                Ok(None)
            } else {
                local_train(global, data, None, &plain, state.shuffle_seed(pos)).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut models = Vec::new();
    let mut sizes = Vec::new();
    let mut losses = Vec::new();
    let mut snapshots = Vec::with_capacity(sequence.len());
    for (&client, outcome) in sequence.iter().zip(outcomes) {
        match outcome {
            Some(out) => {
                losses.extend_from_slice(&out.step_losses);
                snapshots.push(out.model.clone());
                models.push(out.model);
                sizes.push(state.clients[client].len() as f64);
                record.trained.push(client);
            }
            None => snapshots.push(global.snapshot()),
        }
    }
    if models.is_empty() {
        let msg = format!(
            "round {} skipped: every sampled client was empty",
            state.round
        );
        warn!("{msg}");
        record.warning = Some(msg);
    } else {
        state.global_model = weighted_average(&models, &sizes)?;
    }
    record.mean_loss = mean(&losses);
    state.prev_sequence = sequence;
    state.prev_models = snapshots;
    monitor.finish_round(&mut record, &state.global_model)?;
    state.round += 1;
    Ok(record)
}
