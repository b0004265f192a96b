use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{forward_sequence, total_loss, LossConfig, ModelParams};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::tensor::{Adam, AdamConfig, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: AdamConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batch_size: 64,
            seed: 0,
            optimizer: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

/// Per-sequence mean of each loss component over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub estim: f64,
    pub pred: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
}

/// Mini-batch Adam over `data`. Gradients of the per-sequence losses are
/// summed within a batch; one optimizer step is taken per batch.
/// `on_epoch` sees each epoch's statistics as they are produced.
pub fn train(
    params: &mut ModelParams,
    data: &[Sequence],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainReport> {
    if data.is_empty() {
        return Err(Error::Empty("training sequences"));
    }
    if cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    cfg.loss.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.optimizer, &params.store);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut report = TrainReport { epochs: Vec::with_capacity(cfg.epochs) };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            params.store.zero_grads();
            let mut batch_loss = 0.0;
            for &k in chunk {
                let mut t = Tape::new();
                let trace = forward_sequence(&mut t, params, &data[k])?;
                let parts = total_loss(&mut t, &trace, &data[k], &cfg.loss)?;
                let total = t.scalar(parts.total);
                if !total.is_finite() {
                    return Err(Error::Diverged { epoch, batch, loss: total });
                }
                batch_loss += total;
                sums[0] += t.scalar(parts.estim);
                sums[1] += t.scalar(parts.pred);
                sums[2] += t.scalar(parts.penalty);
                sums[3] += total;
                t.backward(parts.total)?.accumulate_into(&mut params.store);
            }
            debug!("epoch {epoch} batch {batch}: loss {batch_loss:.6}");
            adam.step(&mut params.store).map_err(|e| match e {
                Error::NonFiniteGrad { .. } => Error::Diverged {
                    epoch,
                    batch,
                    loss: batch_loss,
                },
                other => other,
            })?;
        }
        let n = data.len() as f64;
        let stats = EpochStats {
            epoch,
            estim: sums[0] / n,
            pred: sums[1] / n,
            penalty: sums[2] / n,
            total: sums[3] / n,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
    }
    Ok(report)
}
