//! Supervised pretraining.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::datasets::SampleRecord;
use crate::error::{Error, Result};
use crate::losses::{supervised_loss, LossConfig};
use crate::metrics::{evaluate, EvalMode};
use crate::nca::{MedNcaConfig, MedNcaModel, Mode};
use crate::optim::{Adam, AdamHyper};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

pub const DEFAULT_LR: f64 = 1.6e-3;

const INIT_STREAM: u64 = 0x1417;
const EPOCH_STREAM: u64 = 0xe90c;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// The learning rate decays exponentially to `lr · lr_final_factor`.
    pub lr_final_factor: f64,
    pub seed: u64,
    /// Level-2 patch side, clamped to the image size.
    pub patch_size: usize,
    /// Save `epoch_NNNN.ncas` every this many epochs; 0 disables.
    pub checkpoint_every: usize,
    /// Validate every this many epochs (and after the last); 0 disables.
    pub val_every: usize,
    pub eval_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 1500,
            batch_size: 8,
            lr: DEFAULT_LR,
            beta1: 0.9,
            beta2: 0.99,
            lr_final_factor: 0.01,
            seed: 0,
            patch_size: 64,
            checkpoint_every: 0,
            val_every: 10,
            eval_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.lr_final_factor > 0.0 && self.lr_final_factor <= 1.0) {
            return Err(Error::invalid("lr_final_factor must be in (0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must be in [0, 1)"));
        }
        if self.patch_size == 0 {
            return Err(Error::invalid("patch_size must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_final_factor.powf(epoch as f64 / self.epochs.max(1) as f64)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationPoint {
    pub epoch: usize,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: usize,
    pub parameters: usize,
    /// Mean batch loss per epoch.
    pub train_loss: Vec<f64>,
    pub validation: Vec<ValidationPoint>,
    pub best_epoch: Option<usize>,
    pub best_val_dice: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub wall_time_s: f64,
}

/// Fresh weights from stream `(seed, init)`; see [`MedNcaModel::initialize`].
pub fn initialize_parameters(config: MedNcaConfig, seed: u64) -> Result<MedNcaModel<f32>> {
    MedNcaModel::initialize(config, &mut Rng::derive(seed, &[INIT_STREAM]))
}

fn batch(samples: &[SampleRecord], idx: &[usize]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let images: Vec<&Tensor<f32>> = idx.iter().map(|&i| &samples[i].image).collect();
    let masks = idx
        .iter()
        .map(|&i| {
            samples[i]
                .mask
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("training sample {:?} has no mask", samples[i].id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
}

/// Dice + focal training on both levels with Adam. Returns the model with
/// the best validation Dice (the final model when nothing is validated).
pub fn train(
    model: &MedNcaModel<f32>,
    train_set: &[SampleRecord],
    val_set: &[SampleRecord],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    out_dir: Option<&Path>,
) -> Result<(MedNcaModel<f32>, TrainReport)> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let started = Instant::now();
    let mut report = TrainReport {
        epochs: cfg.epochs,
        parameters: model.count_parameters(),
        train_loss: Vec::new(),
        validation: Vec::new(),
        best_epoch: None,
        best_val_dice: None,
        best_checkpoint: None,
        wall_time_s: 0.0,
    };
    if cfg.epochs == 0 {
        return Ok((model.clone(), report));
    }
    if train_set.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    if let Some(s) = train_set.iter().find(|s| s.mask.is_none()) {
        return Err(Error::invalid(format!("training sample {:?} has no mask", s.id)));
    }
    let shape = train_set[0].image.shape();
    let patch = cfg.patch_size.min(shape.h).min(shape.w);
    let hyper = AdamHyper {
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        ..AdamHyper::default()
    };

    let mut model = model.clone();
    let mut adam = Adam::new(&model.trainable(), hyper);
    let mut best: Option<(f64, MedNcaModel<f32>)> = None;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::derive(cfg.seed, &[EPOCH_STREAM, epoch as u64]).shuffle(&mut order);
        let mut total = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, idx) in batches.iter().enumerate() {
            let (image, mask) = batch(train_set, idx)?;
            let mut rng = Rng::derive(cfg.seed, &[EPOCH_STREAM, epoch as u64, bi as u64]);
            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let out = model.forward_training_patch(&mut tape, &vars, &image, &mask, &mut rng, patch, Mode::Train)?;
            let p1 = tape.sigmoid(out.logits_l1)?;
            let p2 = tape.sigmoid(out.logits_l2)?;
            let loss = supervised_loss(&mut tape, [p1, p2], [&out.target_l1, &out.target_l2], loss_cfg)?;
            let value = tape.value(loss).data()[0] as f64;
            let grads = tape.backward(loss)?;
            if !value.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    param_norm: model.parameter_norm(),
                });
            }
            adam.step(model.trainable_mut(), &grads, lr)?;
            model.set_bn_stats(out.bn_stats);
            total += value;
        }
        report.train_loss.push(total / batches.len() as f64);

        let last = epoch + 1 == cfg.epochs;
        if let Some(dir) = out_dir {
            if cfg.checkpoint_every > 0 && ((epoch + 1) % cfg.checkpoint_every == 0 || last) {
                checkpoint::save(&model, &dir.join(format!("epoch_{:04}.ncas", epoch + 1)))?;
            }
        }
        if !val_set.is_empty() && cfg.val_every > 0 && ((epoch + 1) % cfg.val_every == 0 || last) {
            let dice = evaluate(&model, val_set, cfg.eval_seed, EvalMode::Single, "")?.dice_mean;
            report.validation.push(ValidationPoint { epoch: epoch + 1, dice });
            if best.as_ref().is_none_or(|(d, _)| dice > *d) {
                best = Some((dice, model.clone()));
                report.best_epoch = Some(epoch + 1);
                report.best_val_dice = Some(dice);
                if let Some(dir) = out_dir {
                    let path = dir.join("best.ncas");
                    checkpoint::save(&model, &path)?;
                    report.best_checkpoint = Some(path);
                }
            }
        }
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    let model = best.map_or(model, |(_, m)| m);
    Ok((model, report))
}
