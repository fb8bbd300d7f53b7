//! Local client training: plain minibatch SGD for a fixed number of epochs
//! from given starting weights, keeping the last epoch's weights.

use serde::{Deserialize, Serialize};

use crate::error::TrainError;
use crate::model::{self, ModelSpec, Sample};
use crate::params::ParamSet;
use crate::rng::Prng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub local_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl TrainConfig {
    /// Defaults per model family: lr 0.05 for the linear models, 0.01 for
    /// the detector, batch size 8, one local epoch.
    pub fn defaults_for(spec: &ModelSpec, seed: u64) -> Self {
        let learning_rate = match spec {
            ModelSpec::GridDetector { .. } => 0.01,
            _ => 0.05,
        };
        Self {
            local_epochs: 1,
            batch_size: 8,
            learning_rate,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.local_epochs == 0 {
            return Err(TrainError::InvalidConfig("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(TrainError::InvalidConfig(format!(
                "learning_rate {} must be finite and non-negative",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientUpdate {
    pub client_id: usize,
    pub params: ParamSet,
    pub sample_count: usize,
    /// Sample-weighted mean minibatch loss over the last epoch.
    pub final_train_loss: f64,
}

/// Run `epochs` epochs of SGD. Epochs are numbered globally starting at
/// `first_epoch`; the shuffle for epoch `e` of client `c` comes from the
/// stream `(cfg.seed, c, e)`, so splitting a run into rounds does not
/// change the data order.
pub fn train_epochs(
    spec: &ModelSpec,
    start: &ParamSet,
    client_id: usize,
    data: &[Sample],
    epochs: usize,
    first_epoch: usize,
    cfg: &TrainConfig,
) -> Result<(ParamSet, f64), TrainError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(TrainError::EmptyShard);
    }
    spec.check_params(start)?;
    let lr = cfg.learning_rate;
    let mut params = start.clone();
    let mut epoch_loss = f64::NAN;

    for epoch in first_epoch..first_epoch + epochs {
        let order = Prng::derive(cfg.seed, &[client_id as u64, epoch as u64]).permutation(data.len());
        let mut loss_sum = 0.0;
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data[i]).collect();
            let (loss, grads) = model::loss_and_grad_f64(spec, &params, &batch)?;
            let diverged = TrainError::Divergence {
                epoch,
                batch: batch_idx,
            };
            if !loss.is_finite() {
                return Err(diverged);
            }
            loss_sum += loss * batch.len() as f64;
            for (tensor, grad) in params.entries_mut().iter_mut().zip(&grads) {
                for (w, g) in tensor.values_mut().iter_mut().zip(grad) {
                    let next = (*w as f64 - lr * g) as f32;
                    if !next.is_finite() {
                        return Err(diverged);
                    }
                    *w = next;
                }
            }
        }
        epoch_loss = loss_sum / data.len() as f64;
    }
    Ok((params, epoch_loss))
}

/// One client's local training for a round: `cfg.local_epochs` epochs
/// starting at global epoch `first_epoch`.
pub fn train_local(
    spec: &ModelSpec,
    start: &ParamSet,
    client_id: usize,
    shard: &[Sample],
    cfg: &TrainConfig,
    first_epoch: usize,
) -> Result<ClientUpdate, TrainError> {
    let (params, final_train_loss) = train_epochs(spec, start, client_id, shard, cfg.local_epochs, first_epoch, cfg)?;
    Ok(ClientUpdate {
        client_id,
        params,
        sample_count: shard.len(),
        final_train_loss,
    })
}

/// Centralized baseline: the same loop as client 0 over the whole set.
pub fn train_centralized(
    spec: &ModelSpec,
    start: &ParamSet,
    data: &[Sample],
    total_epochs: usize,
    cfg: &TrainConfig,
) -> Result<ParamSet, TrainError> {
    train_epochs(spec, start, 0, data, total_epochs, 0, cfg).map(|(p, _)| p)
}
