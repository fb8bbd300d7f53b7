//! Server side: FedAvg and the communication-round state machine.

mod checkpoint;

use std::ops::ControlFlow;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

use crate::error::{AggregateError, Error};
use crate::model::{ModelSpec, Sample};
use crate::params::ParamSet;
use crate::trainer::{train_local, ClientUpdate, TrainConfig};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `n_k / Σ n_j`.
    #[default]
    SampleCount,
    /// `1 / K`.
    Uniform,
}

/// Sample-count weighted FedAvg.
pub fn fed_avg(updates: &[ClientUpdate]) -> Result<ParamSet, AggregateError> {
    fed_avg_weighted(updates, Weighting::SampleCount)
}

/// Weighted mean of client parameters, accumulated in `f64` and stored as
/// `f32`. Updates are summed in client-id order, so the result does not
/// depend on the order of `updates`.
pub fn fed_avg_weighted(updates: &[ClientUpdate], weighting: Weighting) -> Result<ParamSet, AggregateError> {
    let first = updates.first().ok_or(AggregateError::Empty)?;
    let mut order: Vec<&ClientUpdate> = updates.iter().collect();
    order.sort_by_key(|u| u.client_id);
    for pair in order.windows(2) {
        if pair[0].client_id == pair[1].client_id {
            return Err(AggregateError::DuplicateClient(pair[0].client_id));
        }
    }
    for u in &order {
        first.params.check_layout(&u.params)?;
        if u.sample_count == 0 && weighting == Weighting::SampleCount {
            return Err(AggregateError::EmptyUpdate { client: u.client_id });
        }
    }
    let weights: Vec<f64> = match weighting {
        Weighting::SampleCount => {
            let total: usize = order.iter().map(|u| u.sample_count).sum();
            if total == 0 {
                return Err(AggregateError::ZeroSamples);
            }
            order.iter().map(|u| u.sample_count as f64 / total as f64).collect()
        }
        Weighting::Uniform => vec![1.0 / order.len() as f64; order.len()],
    };

    let buffers: Vec<Vec<f64>> = first
        .params
        .entries()
        .iter()
        .enumerate()
        .map(|(e, tensor)| {
            let mut acc = vec![0.0f64; tensor.len()];
            for (u, &wk) in order.iter().zip(&weights) {
                for (a, &v) in acc.iter_mut().zip(u.params.entries()[e].values()) {
                    *a += wk * v as f64;
                }
            }
            acc
        })
        .collect();
    Ok(first.params.with_values_f64(&buffers))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    TargetReached,
    Budget,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "reason", rename_all = "snake_case")]
pub enum RoundStatus {
    Collecting,
    Aggregated,
    Stopped(StopReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop(StopReason),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopCriterion {
    /// mAP@0.5 or accuracy in `[0, 1]`; `None` runs the full budget.
    pub target_metric: Option<f64>,
    pub max_rounds: usize,
}

impl StopCriterion {
    pub fn rounds(max_rounds: usize) -> Self {
        Self {
            target_metric: None,
            max_rounds,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundState {
    /// Completed rounds; the index of the next round to run.
    pub round_index: usize,
    pub expected_clients: usize,
    received: Vec<ClientUpdate>,
    pub global_params: ParamSet,
    /// `(round, metric)` for every completed round.
    pub metric_history: Vec<(usize, f64)>,
    pub status: RoundStatus,
}

impl RoundState {
    pub fn new(expected_clients: usize, global_params: ParamSet) -> Self {
        Self {
            round_index: 0,
            expected_clients,
            received: Vec::new(),
            global_params,
            metric_history: Vec::new(),
            status: RoundStatus::Collecting,
        }
    }

    /// Updates received so far in this round, ordered by client id.
    pub fn received(&self) -> &[ClientUpdate] {
        &self.received
    }

    pub fn is_stopped(&self) -> bool {
        matches!(self.status, RoundStatus::Stopped(_))
    }

    pub fn receive(&mut self, update: ClientUpdate) -> Result<(), AggregateError> {
        if self.is_stopped() {
            return Err(AggregateError::Stopped);
        }
        if update.client_id >= self.expected_clients {
            return Err(AggregateError::UnknownClient {
                client: update.client_id,
                expected: self.expected_clients,
            });
        }
        if update.sample_count == 0 {
            return Err(AggregateError::EmptyUpdate {
                client: update.client_id,
            });
        }
        self.global_params.check_layout(&update.params)?;
        match self.received.binary_search_by_key(&update.client_id, |u| u.client_id) {
            Ok(_) => Err(AggregateError::DuplicateClient(update.client_id)),
            Err(pos) => {
                self.received.insert(pos, update);
                self.status = RoundStatus::Collecting;
                Ok(())
            }
        }
    }

    /// Replace the global model with the FedAvg of this round's updates.
    /// Fires only with every client present.
    pub fn aggregate(&mut self, weighting: Weighting) -> Result<(), AggregateError> {
        if self.is_stopped() {
            return Err(AggregateError::Stopped);
        }
        if self.received.len() != self.expected_clients {
            return Err(AggregateError::MissingClients {
                expected: self.expected_clients,
                received: self.received.len(),
            });
        }
        self.global_params = fed_avg_weighted(&self.received, weighting)?;
        self.received.clear();
        self.status = RoundStatus::Aggregated;
        Ok(())
    }

    /// Record the evaluation of the freshly aggregated model and advance.
    pub fn complete_round(&mut self, metric: f64) {
        self.metric_history.push((self.round_index, metric));
        self.round_index += 1;
    }

    pub fn last_metric(&self) -> Option<f64> {
        self.metric_history.last().map(|&(_, m)| m)
    }

    pub fn should_stop(&self, crit: &StopCriterion) -> Result<StopDecision, AggregateError> {
        should_stop(self, crit)
    }

    pub fn apply(&mut self, decision: StopDecision) {
        if let StopDecision::Stop(reason) = decision {
            self.status = RoundStatus::Stopped(reason);
        }
    }

    pub(crate) fn restore_received(&mut self, updates: Vec<ClientUpdate>) {
        self.received = updates;
    }
}

pub fn should_stop(state: &RoundState, crit: &StopCriterion) -> Result<StopDecision, AggregateError> {
    let last = state.last_metric().ok_or(AggregateError::NoRounds)?;
    if crit.target_metric.is_some_and(|t| last >= t) {
        return Ok(StopDecision::Stop(StopReason::TargetReached));
    }
    if state.round_index >= crit.max_rounds {
        return Ok(StopDecision::Stop(StopReason::Budget));
    }
    Ok(StopDecision::Continue)
}

/// Broadcast the global model, train every client (in parallel), and
/// return the updates in client order. Any client failure fails the whole
/// round.
pub fn collect_updates(
    state: &RoundState,
    spec: &ModelSpec,
    shards: &[Vec<Sample>],
    cfg: &TrainConfig,
) -> Result<Vec<ClientUpdate>, AggregateError> {
    if state.is_stopped() {
        return Err(AggregateError::Stopped);
    }
    if shards.len() != state.expected_clients {
        return Err(AggregateError::ShardCount {
            expected: state.expected_clients,
            actual: shards.len(),
        });
    }
    let start = &state.global_params;
    let first_epoch = state.round_index * cfg.local_epochs;
    shards
        .par_iter()
        .enumerate()
        .map(|(client, shard)| {
            train_local(spec, start, client, shard, cfg, first_epoch)
                .map_err(|source| AggregateError::ClientFailed { client, source })
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// One communication round: broadcast, local training, barrier, FedAvg,
/// evaluation on the fixed test set.
pub fn run_round(
    mut state: RoundState,
    spec: &ModelSpec,
    shards: &[Vec<Sample>],
    cfg: &TrainConfig,
    weighting: Weighting,
    eval_fn: &(dyn Fn(&ParamSet) -> f64 + Sync),
) -> Result<RoundState, AggregateError> {
    for update in collect_updates(&state, spec, shards, cfg)? {
        state.receive(update)?;
    }
    state.aggregate(weighting)?;
    let metric = eval_fn(&state.global_params);
    state.complete_round(metric);
    Ok(state)
}

/// Everything a federated run needs besides its state.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub spec: &'a ModelSpec,
    pub shards: &'a [Vec<Sample>],
    pub train: TrainConfig,
    pub stop: StopCriterion,
    pub weighting: Weighting,
}

impl Federation<'_> {
    /// Run rounds until the stop rule fires. `after_round` sees each
    /// completed state (stop decision applied) and may break early; the
    /// state is returned as it stood at that point.
    pub fn run(
        &self,
        mut state: RoundState,
        eval_fn: &(dyn Fn(&ParamSet) -> f64 + Sync),
        mut after_round: impl FnMut(&RoundState) -> Result<ControlFlow<()>, Error>,
    ) -> Result<RoundState, Error> {
        while !state.is_stopped() {
            state = run_round(state, self.spec, self.shards, &self.train, self.weighting, eval_fn)?;
            let decision = state.should_stop(&self.stop)?;
            state.apply(decision);
            if after_round(&state)?.is_break() {
                break;
            }
        }
        Ok(state)
    }
}
