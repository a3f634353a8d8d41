//! SplitFed training: the client/server relay, federated averaging and the
//! centralized and per-client baselines.

mod client;
mod history;
mod runner;
mod server;

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{argmax_masks, augment_sample, iou_report, soft_dice_loss, stack_batch, train_val_split, AugmentConfig, DataError, MetricReport, Sample};
use crate::model::ModelError;
use crate::nn::init::fnv1a;
use crate::scalar::Scalar;
use crate::tensor::ops::softmax_channel;
use crate::tensor::{Tensor, TensorData, TensorError};
use crate::transport::{NamedTensors, TransportError};

pub use client::ClientState;
pub use history::{summary_table, ClientRoundStats, CommTotals, Regime, RoundStats, RunHistory, SummaryRow};
pub use runner::{
    predict_masks, run_centralized, run_client, run_local_baselines, run_splitfed, serve, train_centralized, train_local_baselines,
    train_splitfed, ServerHub, SplitFedSetup, Trained, TransportKind,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("aggregation failed: {0}")]
    Aggregation(String),
    #[error("{0} thread panicked")]
    Panic(String),
}

pub type Result<T, E = EngineError> = std::result::Result<T, E>;

/// Schedule and optimizer settings shared by all three regimes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoundConfig {
    pub global_rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Average the per-client server copies each round alongside FE and BE.
    pub aggregate_server: bool,
    pub augment: Option<AugmentConfig>,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self { global_rounds: 10, local_epochs: 12, batch_size: 4, lr: 1e-3, seed: 0, aggregate_server: true, augment: None }
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(EngineError::Config(m.to_string()));
        if self.global_rounds == 0 {
            return bad("global_rounds must be >= 1");
        }
        if self.global_rounds > u16::MAX as usize {
            return bad("global_rounds must fit in 16 bits");
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr must be positive");
        }
        Ok(())
    }

    /// Epochs of the monolithic baselines with the same training budget.
    pub fn total_epochs(&self) -> usize {
        self.global_rounds * self.local_epochs
    }
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub id: usize,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl ClientShard {
    /// Seeded 85/15 train/validation split of `samples`.
    pub fn split(id: usize, samples: &[Sample], seed: u64) -> Self {
        let (train, val) = train_val_split(samples, seed ^ fnv1a(format!("shard{id}").as_bytes()));
        Self { id, train, val }
    }
}

/// Sample-count weighted mean of named tensors, accumulated in `f64` over
/// uploads in the order given. Names and shapes must agree across uploads;
/// the output follows the first upload's order.
pub fn fedavg<T: Scalar>(uploads: &[(NamedTensors<T>, u64)]) -> Result<NamedTensors<T>> {
    let err = |m: String| Err(EngineError::Aggregation(m));
    let Some((first, _)) = uploads.first() else {
        return err("no uploads".into());
    };
    let total: u64 = uploads.iter().map(|u| u.1).sum();
    if total == 0 {
        return err("total sample count is zero".into());
    }
    let lookup: Vec<HashMap<&str, &TensorData<T>>> =
        uploads.iter().map(|(e, _)| e.iter().map(|(n, t)| (n.as_str(), t)).collect()).collect();
    for (i, (entries, _)) in uploads.iter().enumerate() {
        if entries.len() != first.len() || lookup[i].len() != entries.len() {
            return err(format!("upload {i} has {} entries, the first has {}", entries.len(), first.len()));
        }
    }
    let mut out = Vec::with_capacity(first.len());
    for (name, t0) in first {
        let mut acc = vec![0.0f64; t0.numel()];
        for (i, (_, count)) in uploads.iter().enumerate() {
            let Some(t) = lookup[i].get(name.as_str()) else {
                return err(format!("upload {i} lacks {name}"));
            };
            if t.shape != t0.shape {
                return err(format!("{name}: shape {:?} in upload {i} vs {:?}", t.shape, t0.shape));
            }
            let w = *count as f64;
            for (a, v) in acc.iter_mut().zip(&t.data) {
                *a += w * v.to_f64().unwrap();
            }
        }
        let data = acc.into_iter().map(|a| T::from_f64_lossy(a / total as f64)).collect();
        out.push((name.clone(), TensorData { shape: t0.shape.clone(), data }));
    }
    Ok(out)
}

/// Independent RNG stream for one `(purpose, client, round, epoch)` slot.
pub(crate) fn stream(seed: u64, purpose: &str, client: usize, round: usize, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(format!("{purpose}/{client}/{round}/{epoch}").as_bytes()));
    rng
}

/// Seeded shuffled (and optionally augmented) batches for one epoch; the
/// last batch may be short.
pub(crate) fn epoch_batches(
    samples: &[Sample],
    cfg: &RoundConfig,
    client: usize,
    round: usize,
    epoch: usize,
) -> Vec<Vec<Sample>> {
    let mut rng = stream(cfg.seed, "epoch", client, round, epoch);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    order
        .chunks(cfg.batch_size)
        .map(|idx| {
            idx.iter()
                .map(|&i| match &cfg.augment {
                    Some(a) => augment_sample(&samples[i], a, &mut rng),
                    None => samples[i].clone(),
                })
                .collect()
        })
        .collect()
}

pub(crate) fn batch_tensors<T: Scalar>(batch: &[Sample]) -> Result<(TensorData<T>, Vec<u8>)> {
    let refs: Vec<&Sample> = batch.iter().collect();
    Ok(stack_batch(&refs)?)
}

/// Soft Dice loss of logits against masks.
pub(crate) fn dice_loss<T: Scalar>(logits: &Tensor<T>, masks: &[u8]) -> Result<Tensor<T>> {
    Ok(soft_dice_loss(&softmax_channel(logits)?, masks, false)?)
}

/// Running validation/test tally.
#[derive(Default)]
pub(crate) struct EvalTally {
    loss_sum: f64,
    samples: usize,
    reports: Vec<MetricReport>,
}

impl EvalTally {
    pub fn add<T: Scalar>(&mut self, logits: &Tensor<T>, masks: &[u8], num_classes: usize) -> Result<()> {
        let n = logits.shape()[0];
        let loss = dice_loss(logits, masks)?.item().to_f64().unwrap();
        self.loss_sum += loss * n as f64;
        self.samples += n;
        let pred = argmax_masks(&logits.detach());
        let hw = masks.len() / n.max(1);
        let fg = crate::data::default_foreground(num_classes);
        for (p, g) in pred.chunks(hw).zip(masks.chunks(hw)) {
            self.reports.push(iou_report(p, g, num_classes, &fg));
        }
        Ok(())
    }

    pub fn loss(&self) -> Option<f64> {
        (self.samples > 0).then(|| self.loss_sum / self.samples as f64)
    }

    pub fn report(&self) -> Option<MetricReport> {
        MetricReport::average(&self.reports)
    }
}
