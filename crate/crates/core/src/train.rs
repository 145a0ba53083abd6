//! The seeded optimization loop and model-level evaluation.
//!
//! One run: preprocess the samples once, apply the freeze policy, build the
//! optimizer over whatever is left trainable, then sweep epochs of
//! mini-batches. Every random choice flows from the config seed, so a rerun
//! with the same inputs reproduces the loss curve bit for bit.

use alloc::string::String;
use alloc::vec::Vec;

use thiserror::Error;

use crate::archive::{ArchiveKind, ParamArchive};
use crate::autograd::Graph;
use crate::data::{preprocess, ImageSample, ModelInput};
use crate::metrics::{self, MetricError, MetricReport};
use crate::model::{CodModel, ModelError};
use crate::nn::{Ctx, ParamStore};
use crate::ops;
use crate::optim::{AdamW, OptimConfig, OptimError};
use crate::rng::SeedRng;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f32,
    pub weight_decay: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub input_size: usize,
    pub freeze_backbone: bool,
    pub seed: u64,
    /// Reshuffle the sample order every epoch (seeded). Off means strict
    /// dataset order.
    pub shuffle: bool,
    /// Cosine decay of the learning rate over epochs; constant when off.
    pub cosine_schedule: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 6e-5,
            weight_decay: 0.05,
            batch_size: 2,
            epochs: 200,
            input_size: 512,
            freeze_backbone: true,
            seed: 0,
            shuffle: true,
            cosine_schedule: false,
        }
    }
}

impl TrainConfig {
    /// Settings for the desk-scale profile: small inputs, few epochs, a
    /// learning rate suited to training from scratch.
    pub fn desk(seed: u64) -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 0.01,
            batch_size: 4,
            epochs: 30,
            input_size: 64,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) {
            return Err(TrainError::LrNotPositive);
        }
        if self.batch_size == 0 {
            return Err(TrainError::BatchSizeZero);
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(TrainError::IndivisibleInputSize {
                size: self.input_size,
            });
        }
        Ok(())
    }
}

#[derive(Error, Debug, Clone, PartialEq)]
pub enum TrainError {
    #[error("learning rate must be positive")]
    LrNotPositive,
    #[error("batch size must be at least 1")]
    BatchSizeZero,
    #[error("input size {size} must be a positive multiple of 32")]
    IndivisibleInputSize { size: usize },
    #[error("training needs at least one sample")]
    EmptyDataset,
    #[error("non-finite loss at step {step} on batch [{}]", batch_ids.join(", "))]
    NonFiniteLoss { step: usize, batch_ids: Vec<String> },
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Outcome of one run: the per-epoch mean loss curve plus final and best
/// parameter snapshots. Snapshots carry the adapter and head when the
/// encoder was frozen, everything otherwise.
#[derive(Debug)]
pub struct TrainResult {
    pub loss_curve: Vec<f64>,
    pub final_archive: ParamArchive,
    pub best_archive: ParamArchive,
    pub best_epoch: usize,
    pub steps: usize,
}

/// Cosine decay from `base` at epoch 0 toward 0 at `epochs`.
fn cosine_lr(base: f32, epoch: usize, epochs: usize) -> f32 {
    let t = epoch as f64 / epochs.max(1) as f64;
    let factor = 0.5 * (1.0 + libm::cos(core::f64::consts::PI * t));
    base * factor as f32
}

/// Runs the optimization loop. The store is left holding the final weights;
/// the returned archives allow rolling back to the best epoch.
pub fn train_loop(
    model: &CodModel,
    store: &mut ParamStore,
    samples: &[ImageSample],
    cfg: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let inputs: Vec<ModelInput> = samples.iter().map(|s| preprocess(s, cfg.input_size)).collect();
    model.set_backbone_frozen(store, cfg.freeze_backbone);
    let mut opt = AdamW::new(store, OptimConfig::new(cfg.lr, cfg.weight_decay))?;
    let kind = if cfg.freeze_backbone {
        ArchiveKind::AdapterOnly
    } else {
        ArchiveKind::Full
    };
    let config_hash = model.cfg.hash();

    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut rng = SeedRng::derive(cfg.seed, 0x7472_6169);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ParamArchive)> = None;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        if cfg.cosine_schedule {
            opt.set_lr(cosine_lr(cfg.lr, epoch, cfg.epochs));
        }
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let mut epoch_loss = 0.0f64;
        for batch in order.chunks(cfg.batch_size) {
            let g = Graph::new();
            let cx = Ctx::new(&g, store);
            let mut parts = Vec::with_capacity(batch.len());
            for &i in batch {
                parts.push(model.forward_train(&cx, &inputs[i].image, &inputs[i].gt)?);
            }
            let loss = ops::mean_of(&g, &parts);
            let value = g.value(loss)[[0]] as f64;
            if !value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    step,
                    batch_ids: batch.iter().map(|&i| inputs[i].id.clone()).collect(),
                });
            }
            epoch_loss += value * batch.len() as f64;
            let mut grads = g.backward(loss);
            let collected = cx.take_param_grads(&mut grads);
            drop(grads);
            drop(cx);
            drop(g);
            for (id, grad) in collected {
                store.accumulate_grad(id, grad);
            }
            opt.step(store);
            step += 1;
        }
        let mean = epoch_loss / inputs.len() as f64;
        loss_curve.push(mean);
        let improved = best.as_ref().map(|(b, _, _)| mean < *b).unwrap_or(true);
        if improved {
            best = Some((mean, epoch, ParamArchive::capture(store, kind, config_hash)));
        }
    }

    let (best_loss, best_epoch, best_archive) = best.unwrap_or_else(|| {
        // Zero epochs: both snapshots are the initialization.
        (
            f64::INFINITY,
            0,
            ParamArchive::capture(store, kind, config_hash),
        )
    });
    let _ = best_loss;
    Ok(TrainResult {
        loss_curve,
        final_archive: ParamArchive::capture(store, kind, config_hash),
        best_archive,
        best_epoch,
        steps: step,
    })
}

#[derive(Error, Debug)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Runs the model over the samples at their original resolutions and
/// aggregates the four measures plus the combined score.
pub fn evaluate_model(
    model: &CodModel,
    store: &ParamStore,
    samples: &[ImageSample],
    input_size: usize,
) -> Result<MetricReport, EvalError> {
    let mut pairs = Vec::with_capacity(samples.len());
    for sample in samples {
        let input = preprocess(sample, input_size);
        let g = Graph::new();
        let cx = Ctx::new(&g, store);
        let map = model.predict(&cx, &input.image, sample.original_size)?;
        let gt = sample.gt.map(|&v| v as f64);
        pairs.push((map.probabilities, gt));
    }
    Ok(metrics::evaluate_samples(&pairs)?)
}
