//! Unsupervised adaptation to a new domain.
//!
//! Phase 1 runs the frozen model several times per unlabeled image and
//! keeps the per-pixel mean and standard deviation of its level-2
//! probabilities. The thresholded mean becomes a surrogate target and
//! `1 - 2σ` a per-pixel confidence weight. Phase 2 fine-tunes on the
//! variance-weighted loss, pulling two independent stochastic outputs
//! towards each other at every level.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::SampleRecord;
use crate::error::{Error, Result};
use crate::inference::predict_levels;
use crate::losses::{vwsl, LevelTarget, LossConfig, OutputPair, VarianceWeights};
use crate::metrics::{evaluate, EvalMode};
use crate::nca::{level1_target, MedNcaModel, Mode, INFERENCE_MODE};
use crate::optim::{Adam, AdamHyper};
use crate::rng::{hash_str, Rng};
use crate::tensor::{Tape, Tensor};
use crate::trainer::DEFAULT_LR;

const PHASE1_STREAM: u64 = 0xada1;
const PHASE2_STREAM: u64 = 0xada2;
const PROBE_STREAM: u64 = 0xada3;

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleStats {
    /// `[n, 1, h, w]` in `[0, 1]`.
    pub mean: Tensor<f32>,
    /// Population standard deviation, in `[0, 0.5]`.
    pub std: Tensor<f32>,
    pub n_runs: usize,
}

impl EnsembleStats {
    /// Per-pixel mean and population standard deviation of `runs`,
    /// accumulated in `f64` in run order.
    pub fn from_runs(runs: &[Tensor<f32>]) -> Result<Self> {
        if runs.len() < 2 {
            return Err(Error::invalid(format!("ensemble needs at least 2 runs, got {}", runs.len())));
        }
        let shape = runs[0].shape();
        if let Some(r) = runs.iter().find(|r| r.shape() != shape) {
            return Err(Error::invalid(format!("ensemble runs disagree in shape: {:?} vs {:?}", shape, r.shape())));
        }
        let n = runs.len() as f64;
        let mut mean = vec![0f64; shape.numel()];
        for r in runs {
            for (m, &v) in mean.iter_mut().zip(r.data()) {
                *m += v as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0f64; shape.numel()];
        for r in runs {
            for ((s, &m), &v) in var.iter_mut().zip(&mean).zip(r.data()) {
                let d = v as f64 - m;
                *s += d * d;
            }
        }
        let to_tensor = |v: Vec<f32>| Tensor::from_vec(shape, v).expect("shape matches");
        Ok(EnsembleStats {
            mean: to_tensor(mean.iter().map(|&m| m as f32).collect()),
            std: to_tensor(var.iter().map(|&s| (s / n).sqrt() as f32).collect()),
            n_runs: runs.len(),
        })
    }
}

/// `n_runs` inference-mode forwards of `image`, run `r` drawing from stream
/// `(seed, r)`.
pub fn ensemble_predict(model: &MedNcaModel<f32>, image: &Tensor<f32>, n_runs: usize, seed: u64) -> Result<EnsembleStats> {
    if n_runs < 2 {
        return Err(Error::invalid(format!("n_runs must be at least 2, got {n_runs}")));
    }
    let runs: Vec<Tensor<f32>> = (0..n_runs)
        .into_par_iter()
        .map(|r| {
            let mut rng = Rng::derive(seed, &[r as u64]);
            predict_levels(model, image, &mut rng).map(|(_, p2)| p2)
        })
        .collect::<Result<_>>()?;
    EnsembleStats::from_runs(&runs)
}

/// Supervision derived from one image's ensemble, at both resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct Surrogate {
    pub target: Tensor<f32>,
    pub weights: VarianceWeights<f32>,
    pub target_l1: Tensor<f32>,
    pub weights_l1: VarianceWeights<f32>,
}

/// `target = 1[mean ≥ 0.5]`, `w = clamp(1 - 2σ, 0, 1)`; the level-1 pair
/// is the bilinear downsample of each (target re-binarized).
pub fn build_surrogate(stats: &EnsembleStats, scale_factor: usize, clamp: bool) -> Result<Surrogate> {
    let target = stats.mean.threshold(0.5);
    let weights = VarianceWeights::from_std(&stats.std, clamp);
    Ok(Surrogate {
        target_l1: level1_target(&target, scale_factor)?,
        weights_l1: weights.downsample(scale_factor)?,
        target,
        weights,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsRefresh {
    Never,
    EveryKEpochs(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub n_runs: usize,
    pub epochs: usize,
    /// Overrides `LossConfig::vwsl_gamma` during adaptation.
    pub vwsl_gamma: f64,
    pub lr: f64,
    pub seed: u64,
    pub freeze_bn_stats: bool,
    pub stats_refresh: StatsRefresh,
    pub batch_size: usize,
    /// Level-2 patch side; `None` adapts on whole images.
    pub patch_size: Option<usize>,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            n_runs: 10,
            epochs: 100,
            vwsl_gamma: 1e3,
            lr: DEFAULT_LR / 10.0,
            seed: 0,
            freeze_bn_stats: true,
            stats_refresh: StatsRefresh::Never,
            batch_size: 8,
            patch_size: None,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_runs < 2 {
            return Err(Error::invalid("n_runs must be at least 2"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(self.vwsl_gamma >= 0.0) {
            return Err(Error::invalid("vwsl_gamma must be >= 0"));
        }
        if self.patch_size == Some(0) {
            return Err(Error::invalid("patch_size must be positive"));
        }
        if self.stats_refresh == StatsRefresh::EveryKEpochs(0) {
            return Err(Error::invalid("stats_refresh interval must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub epochs: usize,
    pub vwsl_gamma: f64,
    pub n_images: usize,
    /// Mean loss per epoch.
    pub loss: Vec<f64>,
    /// Mean |o1 - o2| of level-2 probabilities over the adaptation images.
    pub consistency_before: f64,
    pub consistency_after: f64,
    pub surrogate_foreground: f64,
    pub predicted_foreground_after: f64,
    /// Single-pass Dice against reference masks, when every image has one.
    pub dice_before: Option<f64>,
    pub dice_after: Option<f64>,
    pub surrogate_dice: Option<f64>,
    pub surrogate_refreshes: usize,
}

pub struct AdaptOutcome {
    pub model: MedNcaModel<f32>,
    pub report: AdaptReport,
    /// Phase-1 statistics per image, in input order.
    pub stats: Vec<EnsembleStats>,
    pub surrogates: Vec<Surrogate>,
}

fn phase1(model: &MedNcaModel<f32>, images: &[SampleRecord], cfg: &AdaptConfig, loss: &LossConfig, round: u64) -> Result<(Vec<EnsembleStats>, Vec<Surrogate>)> {
    let stats: Vec<EnsembleStats> = images
        .par_iter()
        .map(|s| {
            let seed = Rng::derive(cfg.seed, &[PHASE1_STREAM, round, hash_str(&s.id)]).next_u64();
            ensemble_predict(model, &s.image, cfg.n_runs, seed)
        })
        .collect::<Result<_>>()?;
    let surrogates = stats
        .iter()
        .map(|st| build_surrogate(st, model.config.scale_factor, loss.weight_clamp))
        .collect::<Result<_>>()?;
    Ok((stats, surrogates))
}

/// Mean |o1 - o2| and mean predicted foreground over `images`, from two
/// fixed-seed inference forwards per image.
pub fn consistency_probe(model: &MedNcaModel<f32>, images: &[SampleRecord], seed: u64) -> Result<(f64, f64)> {
    let per: Vec<(f64, f64)> = images
        .par_iter()
        .map(|s| {
            let h = hash_str(&s.id);
            let (_, a) = predict_levels(model, &s.image, &mut Rng::derive(seed, &[PROBE_STREAM, h, 0]))?;
            let (_, b) = predict_levels(model, &s.image, &mut Rng::derive(seed, &[PROBE_STREAM, h, 1]))?;
            let n = a.numel() as f64;
            let l1 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs() as f64).sum::<f64>() / n;
            let fg = a.data().iter().filter(|&&v| v > 0.5).count() as f64 / n;
            Ok((l1, fg))
        })
        .collect::<Result<_>>()?;
    let n = per.len().max(1) as f64;
    Ok((per.iter().map(|p| p.0).sum::<f64>() / n, per.iter().map(|p| p.1).sum::<f64>() / n))
}

fn stack(items: Vec<&Tensor<f32>>) -> Result<Tensor<f32>> {
    Tensor::stack(&items)
}

fn crop_opt(t: Tensor<f32>, offset: (usize, usize), patch: usize, full: usize) -> Result<Tensor<f32>> {
    if patch == full {
        Ok(t)
    } else {
        t.crop(offset.0, offset.1, patch, patch)
    }
}

/// Two-phase adaptation on `images` (masks, if present, are used only for
/// the before/after Dice in the report).
pub fn adapt(model: &MedNcaModel<f32>, images: &[SampleRecord], cfg: &AdaptConfig, loss_cfg: &LossConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("adapt: no images"));
    }
    let shape = images[0].image.shape();
    if let Some(s) = images.iter().find(|s| s.image.shape() != shape) {
        return Err(Error::invalid(format!("adapt: image {:?} has shape {:?}, expected {:?}", s.id, s.image.shape(), shape)));
    }
    let loss_cfg = LossConfig {
        vwsl_gamma: cfg.vwsl_gamma,
        ..loss_cfg.clone()
    };
    let labeled = images.iter().all(|s| s.mask.is_some());
    let dice = |m: &MedNcaModel<f32>| -> Result<Option<f64>> {
        if labeled {
            Ok(Some(evaluate(m, images, cfg.seed, EvalMode::Single, "")?.dice_mean))
        } else {
            Ok(None)
        }
    };

    let (stats, mut surrogates) = phase1(model, images, cfg, &loss_cfg, 0)?;
    let surrogate_foreground = surrogates.iter().map(|s| s.target.mean() as f64).sum::<f64>() / images.len() as f64;
    let surrogate_dice = labeled.then(|| {
        let scores: Vec<f64> = images
            .iter()
            .zip(&surrogates)
            .map(|(s, g)| crate::metrics::dice_metric(g.target.data(), s.mask.as_ref().unwrap().data()))
            .collect();
        scores.iter().sum::<f64>() / scores.len() as f64
    });
    let (consistency_before, _) = consistency_probe(model, images, cfg.seed)?;
    let dice_before = dice(model)?;

    let mut model = model.clone();
    let mut adam = Adam::new(&model.trainable(), AdamHyper::default());
    let patch = cfg.patch_size.unwrap_or(shape.h).min(shape.h).min(shape.w);
    let mode = if cfg.freeze_bn_stats { INFERENCE_MODE } else { Mode::Train };
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut refreshes = 0;
    for epoch in 0..cfg.epochs {
        if let StatsRefresh::EveryKEpochs(k) = cfg.stats_refresh {
            if epoch > 0 && epoch % k == 0 {
                refreshes += 1;
                surrogates = phase1(&model, images, cfg, &loss_cfg, refreshes as u64)?.1;
            }
        }
        let mut order: Vec<usize> = (0..images.len()).collect();
        Rng::derive(cfg.seed, &[PHASE2_STREAM, epoch as u64]).shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        for (bi, idx) in batches.iter().enumerate() {
            let path = [PHASE2_STREAM, epoch as u64, bi as u64];
            let mut offset_rng = Rng::derive(cfg.seed, &[path[0], path[1], path[2], 0]);
            let oy = if shape.h > patch { offset_rng.below((shape.h - patch + 1) as u64) as usize } else { 0 };
            let ox = if shape.w > patch { offset_rng.below((shape.w - patch + 1) as u64) as usize } else { 0 };
            let offset = (oy, ox);
            let image = stack(idx.iter().map(|&i| &images[i].image).collect())?;
            let sur: Vec<&Surrogate> = idx.iter().map(|&i| &surrogates[i]).collect();
            let target = crop_opt(stack(sur.iter().map(|s| &s.target).collect())?, offset, patch, shape.h)?;
            let weights = VarianceWeights {
                w: crop_opt(stack(sur.iter().map(|s| &s.weights.w).collect())?, offset, patch, shape.h)?,
            };
            let target_l1 = stack(sur.iter().map(|s| &s.target_l1).collect())?;
            let weights_l1 = VarianceWeights {
                w: stack(sur.iter().map(|s| &s.weights_l1.w).collect())?,
            };

            let mut tape = Tape::new();
            let vars = model.register(&mut tape);
            let mut rng1 = Rng::derive(cfg.seed, &[path[0], path[1], path[2], 1]);
            let mut rng2 = Rng::derive(cfg.seed, &[path[0], path[1], path[2], 2]);
            let a = model.forward_patch_at(&mut tape, &vars, &image, &mut rng1, offset, patch, mode)?;
            let b = model.forward_patch_at(&mut tape, &vars, &image, &mut rng2, offset, patch, mode)?;
            let pairs = [
                OutputPair {
                    o1: tape.sigmoid(a.logits_l1)?,
                    o2: tape.sigmoid(b.logits_l1)?,
                },
                OutputPair {
                    o1: tape.sigmoid(a.logits_l2)?,
                    o2: tape.sigmoid(b.logits_l2)?,
                },
            ];
            let targets = [
                LevelTarget {
                    target: &target_l1,
                    weights: &weights_l1,
                },
                LevelTarget {
                    target: &target,
                    weights: &weights,
                },
            ];
            let loss = vwsl(&mut tape, &pairs, &targets, &loss_cfg)?;
            let value = tape.value(loss).data()[0] as f64;
            let grads = tape.backward(loss)?;
            if !value.is_finite() || !grads.all_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: bi,
                    param_norm: model.parameter_norm(),
                });
            }
            epoch_loss += value;
            adam.step(model.trainable_mut(), &grads, cfg.lr)?;
            if !cfg.freeze_bn_stats {
                model.set_bn_stats(b.bn_stats);
            }
        }
        losses.push(epoch_loss / batches.len() as f64);
    }

    let (consistency_after, predicted_foreground_after) = consistency_probe(&model, images, cfg.seed)?;
    let dice_after = dice(&model)?;
    Ok(AdaptOutcome {
        report: AdaptReport {
            epochs: cfg.epochs,
            vwsl_gamma: cfg.vwsl_gamma,
            n_images: images.len(),
            loss: losses,
            consistency_before,
            consistency_after,
            surrogate_foreground,
            predicted_foreground_after,
            dice_before,
            dice_after,
            surrogate_dice,
            surrogate_refreshes: refreshes,
        },
        model,
        stats,
        surrogates,
    })
}
