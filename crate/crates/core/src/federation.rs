//! FedAvg engine: local training, parameter and embedding aggregation,
//! redistribution and communication bookkeeping.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::harness::metrics::{evaluate, Evaluation};
use crate::model::{forward_graph, ModelConfig, ModelParams};
use crate::numerics::Graph;
use crate::regularizers::{local_objective, EmbeddingReference, GlobalView, RegConfig};
use crate::synthdata::{client_weights, shuffled, ClientShard, Corpus, Severity, Utterance};

/// How much local work a client does between synchronizations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LocalSteps {
    /// One pass over the client's own shard.
    Epoch,
    /// A fixed number of mini-batches, continuing through the shard across rounds.
    Batches(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommSchedule {
    pub local_steps: LocalSteps,
    pub total_rounds: usize,
    /// Fraction of clients sampled per round.
    pub participation: f64,
}

impl Default for CommSchedule {
    fn default() -> Self {
        Self {
            local_steps: LocalSteps::Epoch,
            total_rounds: 100,
            participation: 1.0,
        }
    }
}

impl CommSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_rounds == 0 {
            return Err(config_err("total_rounds must be at least 1"));
        }
        if let LocalSteps::Batches(0) = self.local_steps {
            return Err(config_err("local_steps batches must be at least 1"));
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            return Err(config_err("participation must be in (0, 1]"));
        }
        Ok(())
    }

    /// Steps per round for a client with `batches_per_epoch` batches.
    pub fn steps_per_round(&self, batches_per_epoch: usize) -> usize {
        match self.local_steps {
            LocalSteps::Epoch => batches_per_epoch,
            LocalSteps::Batches(k) => k,
        }
    }

    pub fn total_steps(&self, batches_per_epoch: usize) -> usize {
        self.total_rounds * self.steps_per_round(batches_per_epoch)
    }

    /// Schedule syncing every `k` batches that spends `epochs` epochs of a
    /// client with `batches_per_epoch` batches. `k` must divide the budget.
    pub fn every_batches(k: usize, epochs: usize, batches_per_epoch: usize) -> Result<Self> {
        let budget = epochs * batches_per_epoch;
        if k == 0 || !budget.is_multiple_of(k) {
            return Err(config_err(format!(
                "sync interval {k} does not divide the step budget {budget}"
            )));
        }
        Ok(Self {
            local_steps: LocalSteps::Batches(k),
            total_rounds: budget / k,
            participation: 1.0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.05,
            batch_size: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(config_err("lr must be finite and >= 0"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be at least 1"));
        }
        Ok(())
    }

    pub fn batches_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// Scalars exchanged between clients and server so far.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommCounters {
    /// Model parameters, uplink plus downlink.
    pub param_scalars: u64,
    /// Pooled embedding values, uplink.
    pub embed_scalars: u64,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub severity: Option<Severity>,
    shard: Arc<Vec<Utterance>>,
    pub params: ModelParams,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    /// Infeasible utterances encountered so far.
    pub skipped: usize,
}

impl ClientState {
    pub fn new(shard: &ClientShard, params: &ModelParams, seed: u64) -> Result<Self> {
        if shard.train.is_empty() {
            return Err(Error::Data(format!(
                "client {} has no utterances",
                shard.id
            )));
        }
        if shard
            .train
            .iter()
            .all(|u| !u.labels.is_feasible(u.frames()))
        {
            return Err(Error::Data(format!(
                "every utterance of client {} is CTC-infeasible",
                shard.id
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(shard.id as u64 + 1);
        Ok(Self {
            id: shard.id,
            severity: shard.severity,
            shard: Arc::new(shard.train.clone()),
            params: params.clone(),
            rng,
            order: Vec::new(),
            cursor: 0,
            skipped: 0,
        })
    }

    pub fn samples(&self) -> usize {
        self.shard.len()
    }

    pub fn shard(&self) -> &[Utterance] {
        &self.shard
    }

    fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.cursor == 0 {
            self.order = shuffled(self.shard.len(), &mut self.rng);
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let batch = self.order[self.cursor..end].to_vec();
        self.cursor = if end >= self.order.len() { 0 } else { end };
        batch
    }
}

#[derive(Debug, Clone)]
pub struct GlobalState {
    /// Completed rounds.
    pub round: usize,
    pub params: ModelParams,
    pub reference: Option<EmbeddingReference>,
    pub comm: CommCounters,
}

impl GlobalState {
    pub fn new(params: ModelParams) -> Self {
        Self {
            round: 0,
            params,
            reference: None,
            comm: CommCounters::default(),
        }
    }
}

/// Pooled embeddings one client uploads.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingReport {
    pub client: usize,
    pub vectors: BTreeMap<usize, Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LocalUpdate {
    pub client: usize,
    pub params: ModelParams,
    pub embeddings: Option<EmbeddingReport>,
    pub steps: usize,
    /// Mean local objective over the steps taken.
    pub mean_objective: f64,
}

/// One SGD step on `batch`; returns the objective value.
pub fn sgd_step(
    params: &mut ModelParams,
    batch: &[&Utterance],
    global: &GlobalView<'_>,
    cfg: &RegConfig,
    lr: f64,
) -> Result<(f64, usize)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let obj = local_objective(&mut g, batch, &bound, global, cfg)?;
    let value = g.value(obj.total).item();
    let grads = g.backward(obj.total)?;
    let mut flat = Vec::with_capacity(params.len());
    for v in bound.vars() {
        grads.extend_into(*v, &mut flat);
    }
    for (w, d) in params.flat_mut().iter_mut().zip(&flat) {
        *w -= lr * d;
    }
    Ok((value, obj.skipped))
}

/// Dataset mean over utterances of the time-pooled embedding at each tap.
pub fn pooled_embeddings(
    params: &ModelParams,
    data: &[Utterance],
    taps: &[usize],
) -> Result<BTreeMap<usize, Vec<f64>>> {
    let d = params.config().d_model;
    let mut sums: BTreeMap<usize, Vec<f64>> = taps.iter().map(|&t| (t, vec![0.0; d])).collect();
    for u in data {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let x = g.constant(u.features.clone());
        let trace = forward_graph(&mut g, &bound, x, taps)?;
        for (l, e) in &trace.taps {
            let pooled = g.mean_rows(*e);
            for (s, v) in sums
                .get_mut(l)
                .expect("tap")
                .iter_mut()
                .zip(g.value(pooled).data())
            {
                *s += v;
            }
        }
    }
    let n = data.len() as f64;
    for v in sums.values_mut() {
        v.iter_mut().for_each(|x| *x /= n);
    }
    Ok(sums)
}

/// Runs a client's local round starting from the global model.
pub fn local_train(
    client: &mut ClientState,
    global: &GlobalState,
    cfg: &RegConfig,
    schedule: &CommSchedule,
    train: &TrainConfig,
) -> Result<LocalUpdate> {
    if cfg.embed_active() && global.round >= 1 {
        match &global.reference {
            Some(r) if r.round == global.round => {
                for t in &cfg.embed_taps {
                    if !r.vectors.contains_key(t) {
                        return Err(Error::Protocol(format!(
                            "round {}: reference lacks tap {t}",
                            global.round + 1
                        )));
                    }
                }
            }
            Some(r) => {
                return Err(Error::Protocol(format!(
                    "round {}: reference is from round {}, expected {}",
                    global.round + 1,
                    r.round,
                    global.round
                )))
            }
            None => {
                return Err(Error::Protocol(format!(
                    "round {}: no embedding reference available",
                    global.round + 1
                )))
            }
        }
    }
    client.params = global.params.clone();
    let view = GlobalView {
        params: &global.params,
        reference: global.reference.as_ref(),
    };
    let steps = schedule.steps_per_round(train.batches_per_epoch(client.samples()));
    let shard = Arc::clone(&client.shard);
    let mut objective_sum = 0.0;
    let mut taken = 0;
    for _ in 0..steps {
        let idx = client.next_batch(train.batch_size);
        let feasible: Vec<&Utterance> = idx
            .iter()
            .map(|&i| &shard[i])
            .filter(|u| u.labels.is_feasible(u.frames()))
            .collect();
        client.skipped += idx.len() - feasible.len();
        if feasible.is_empty() {
            continue;
        }
        let (value, _) = sgd_step(&mut client.params, &feasible, &view, cfg, train.lr)?;
        objective_sum += value;
        taken += 1;
    }
    let embeddings = if cfg.exchanges_embeddings() {
        Some(EmbeddingReport {
            client: client.id,
            vectors: pooled_embeddings(&client.params, &shard, &cfg.embed_taps)?,
        })
    } else {
        None
    };
    Ok(LocalUpdate {
        client: client.id,
        params: client.params.clone(),
        embeddings,
        steps: taken,
        mean_objective: if taken > 0 {
            objective_sum / taken as f64
        } else {
            0.0
        },
    })
}

fn check_weights(weights: &[f64], n: usize) -> Result<()> {
    if weights.len() != n || n == 0 {
        return Err(Error::Protocol(format!(
            "{} weights for {n} clients",
            weights.len()
        )));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
        return Err(Error::Protocol(format!(
            "aggregation weights must be non-negative and sum to 1, got {total}"
        )));
    }
    Ok(())
}

/// `Σᵢ wᵢ·Wᵢ`, accumulated in the given client order.
pub fn fedavg_aggregate(params: &[&ModelParams], weights: &[f64]) -> Result<ModelParams> {
    check_weights(weights, params.len())?;
    let first = params[0];
    if let Some(bad) = params.iter().position(|p| !p.same_shape(first)) {
        return Err(Error::Protocol(format!(
            "client {bad} has {} parameters, expected {}",
            params[bad].len(),
            first.len()
        )));
    }
    let mut out = vec![0.0; first.len()];
    for (p, &w) in params.iter().zip(weights) {
        for (o, v) in out.iter_mut().zip(p.flat()) {
            *o += w * v;
        }
    }
    ModelParams::from_flat(first.config(), out)
}

/// Weighted sum of client pooled embeddings for every tap in `taps`.
pub fn aggregate_embeddings(
    reports: &[&EmbeddingReport],
    weights: &[f64],
    taps: &[usize],
    round: usize,
) -> Result<EmbeddingReference> {
    check_weights(weights, reports.len())?;
    let mut vectors = BTreeMap::new();
    for &t in taps {
        let mut acc: Option<Vec<f64>> = None;
        for (r, &w) in reports.iter().zip(weights) {
            let v = r.vectors.get(&t).ok_or_else(|| {
                Error::Protocol(format!("client {} did not report tap {t}", r.client))
            })?;
            let a = acc.get_or_insert_with(|| vec![0.0; v.len()]);
            if a.len() != v.len() {
                return Err(Error::Protocol(format!(
                    "client {} reported width {} at tap {t}, expected {}",
                    r.client,
                    v.len(),
                    a.len()
                )));
            }
            for (x, y) in a.iter_mut().zip(v) {
                *x += w * y;
            }
        }
        vectors.insert(t, acc.unwrap_or_default());
    }
    Ok(EmbeddingReference { round, vectors })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundSummary {
    pub round: usize,
    pub participants: Vec<usize>,
    pub steps: Vec<usize>,
    pub train_objective: f64,
}

/// Federation of clients around one server state.
pub struct Federation {
    pub global: GlobalState,
    pub clients: Vec<ClientState>,
    pub reg: RegConfig,
    pub schedule: CommSchedule,
    pub train: TrainConfig,
    server_rng: ChaCha8Rng,
    pool: Option<rayon::ThreadPool>,
}

impl Federation {
    pub fn new(
        shards: &[ClientShard],
        init: ModelParams,
        reg: RegConfig,
        schedule: CommSchedule,
        train: TrainConfig,
        seed: u64,
    ) -> Result<Self> {
        reg.validate(init.config())?;
        schedule.validate()?;
        train.validate()?;
        if shards.is_empty() {
            return Err(config_err("no clients"));
        }
        let mut clients = shards
            .iter()
            .map(|s| ClientState::new(s, &init, seed))
            .collect::<Result<Vec<_>>>()?;
        clients.sort_by_key(|c| c.id);
        let mut server_rng = ChaCha8Rng::seed_from_u64(seed);
        server_rng.set_stream(u64::MAX);
        Ok(Self {
            global: GlobalState::new(init),
            clients,
            reg,
            schedule,
            train,
            server_rng,
            pool: None,
        })
    }

    /// Trains clients on a dedicated pool of `threads` workers.
    pub fn with_threads(mut self, threads: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| config_err(e.to_string()))?;
        self.pool = Some(pool);
        Ok(self)
    }

    pub fn model_config(&self) -> &ModelConfig {
        self.global.params.config()
    }

    fn participants(&mut self) -> Vec<usize> {
        let n = self.clients.len();
        if self.schedule.participation >= 1.0 {
            return (0..n).collect();
        }
        let m = ((self.schedule.participation * n as f64).round() as usize).clamp(1, n);
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(&mut self.server_rng);
        let mut chosen = idx[..m].to_vec();
        chosen.sort_unstable();
        chosen
    }

    /// Local training on every participant, then aggregation.
    pub fn run_round(&mut self) -> Result<RoundSummary> {
        let chosen = self.participants();
        let global = &self.global;
        let (reg, schedule, train) = (&self.reg, &self.schedule, &self.train);
        let mut selected: Vec<&mut ClientState> = self
            .clients
            .iter_mut()
            .enumerate()
            .filter(|(i, _)| chosen.contains(i))
            .map(|(_, c)| c)
            .collect();
        let work = |sel: &mut Vec<&mut ClientState>| {
            sel.par_iter_mut()
                .map(|c| local_train(c, global, reg, schedule, train))
                .collect::<Result<Vec<_>>>()
        };
        let updates = match &self.pool {
            Some(pool) => pool.install(|| work(&mut selected)),
            None => work(&mut selected),
        }?;

        let counts: Vec<usize> = chosen.iter().map(|&i| self.clients[i].samples()).collect();
        let weights = client_weights(&counts);
        let params: Vec<&ModelParams> = updates.iter().map(|u| &u.params).collect();
        let new_params = fedavg_aggregate(&params, &weights)?;

        let n = updates.len() as u64;
        let width = new_params.len() as u64;
        self.global.comm.param_scalars += 2 * n * width;
        if self.reg.exchanges_embeddings() {
            let reports: Vec<&EmbeddingReport> = updates
                .iter()
                .map(|u| {
                    u.embeddings.as_ref().ok_or_else(|| {
                        Error::Protocol(format!("client {} sent no embeddings", u.client))
                    })
                })
                .collect::<Result<_>>()?;
            let reference = aggregate_embeddings(
                &reports,
                &weights,
                &self.reg.embed_taps,
                self.global.round + 1,
            )?;
            self.global.comm.embed_scalars +=
                n * (self.reg.embed_taps.len() * self.model_config().d_model) as u64;
            self.global.reference = Some(reference);
        }
        self.global.params = new_params;
        self.global.round += 1;

        let train_objective = updates
            .iter()
            .zip(&weights)
            .map(|(u, w)| u.mean_objective * w)
            .sum();
        Ok(RoundSummary {
            round: self.global.round,
            participants: chosen.iter().map(|&i| self.clients[i].id).collect(),
            steps: updates.iter().map(|u| u.steps).collect(),
            train_objective,
        })
    }

    /// Batches per epoch of the largest client.
    pub fn reference_batches_per_epoch(&self) -> usize {
        self.clients
            .iter()
            .map(|c| self.train.batches_per_epoch(c.samples()))
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    Federated,
    /// All training data on a single client.
    Centralized,
}

/// Metrics recorded after one round.
#[derive(Debug, Clone)]
pub struct RoundRecord {
    pub round: usize,
    pub train_objective: f64,
    pub comm: CommCounters,
    /// Held-out evaluation; `None` for rounds skipped by `eval_every`.
    pub eval: Option<Evaluation>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub history: Vec<RoundRecord>,
    pub final_params: ModelParams,
    pub comm: CommCounters,
    /// Steps taken by the client with the most data.
    pub total_steps: usize,
}

impl ExperimentOutcome {
    pub fn final_eval(&self) -> Option<&Evaluation> {
        self.history.iter().rev().find_map(|r| r.eval.as_ref())
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentSetup {
    pub model: ModelConfig,
    pub reg: RegConfig,
    pub schedule: CommSchedule,
    pub train: TrainConfig,
    pub mode: TrainingMode,
    /// Evaluate every this many rounds; the last round is always evaluated.
    pub eval_every: usize,
    pub threads: usize,
}

/// Runs all rounds of one experiment and evaluates on the held-out set.
pub fn run_experiment(
    corpus: &Corpus,
    setup: &ExperimentSetup,
    seed: u64,
) -> Result<ExperimentOutcome> {
    let init = ModelParams::init(&setup.model, seed)?;
    let pooled;
    let shards = match setup.mode {
        TrainingMode::Federated => &corpus.clients,
        TrainingMode::Centralized => {
            pooled = corpus.pooled();
            &pooled.clients
        }
    };
    let mut fed = Federation::new(
        shards,
        init,
        setup.reg.clone(),
        setup.schedule.clone(),
        setup.train.clone(),
        seed,
    )?;
    if setup.threads > 1 {
        fed = fed.with_threads(setup.threads)?;
    }
    let every = setup.eval_every.max(1);
    let mut history = Vec::with_capacity(setup.schedule.total_rounds);
    let mut total_steps = 0;
    let largest = fed
        .clients
        .iter()
        .enumerate()
        .max_by_key(|(i, c)| (c.samples(), std::cmp::Reverse(*i)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    for r in 1..=setup.schedule.total_rounds {
        let summary = fed.run_round()?;
        if let Some(pos) = summary
            .participants
            .iter()
            .position(|&id| id == fed.clients[largest].id)
        {
            total_steps += summary.steps[pos];
        }
        let eval = if r % every == 0 || r == setup.schedule.total_rounds {
            Some(evaluate(&fed.global.params, &corpus.test)?)
        } else {
            None
        };
        history.push(RoundRecord {
            round: r,
            train_objective: summary.train_objective,
            comm: fed.global.comm,
            eval,
        });
    }
    Ok(ExperimentOutcome {
        history,
        comm: fed.global.comm,
        final_params: fed.global.params,
        total_steps,
    })
}
