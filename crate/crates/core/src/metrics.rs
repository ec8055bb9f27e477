//! Dice evaluation, report tables and overlay images.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapter::ensemble_predict;
use crate::datasets::pgm::{quantize, GrayImage};
use crate::datasets::SampleRecord;
use crate::error::{Error, Result};
use crate::inference::predict_probs;
use crate::nca::MedNcaModel;
use crate::rng::{hash_str, Rng};
use crate::tensor::Tensor;

/// Gray level of predicted-mask contours in overlays.
pub const PRED_CONTOUR_LEVEL: u8 = 255;
/// Gray level of reference-mask contours in overlays (drawn first, so a
/// pixel on both contours shows the prediction level).
pub const TRUTH_CONTOUR_LEVEL: u8 = 0;

/// `2|P∩T| / (|P| + |T|)` with values above 0.5 counted as foreground.
/// Two empty masks score 1.
pub fn dice_metric(pred: &[f32], mask: &[f32]) -> f64 {
    assert_eq!(pred.len(), mask.len(), "dice_metric: length mismatch");
    let (mut inter, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(mask) {
        let (p, t) = (p > 0.5, t > 0.5);
        inter += (p && t) as usize;
        np += p as usize;
        nt += t as usize;
    }
    if np + nt == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (np + nt) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum EvalMode {
    /// One seeded forward, probability > 0.5.
    Single,
    /// Mean of `n_runs` forwards, mean ≥ 0.5.
    EnsembleMean { n_runs: usize },
}

impl EvalMode {
    pub fn label(&self) -> String {
        match self {
            EvalMode::Single => "single".into(),
            EvalMode::EnsembleMean { n_runs } => format!("ensemble_mean_{n_runs}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleDice {
    pub id: String,
    pub dice: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub domain: String,
    pub mode: EvalMode,
    pub seed: u64,
    pub n: usize,
    pub dice_mean: f64,
    /// Population standard deviation of the per-sample scores.
    pub dice_std: f64,
    pub samples: Vec<SampleDice>,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Binary prediction for one `[1, 1, h, w]` image.
pub fn predict_mask(model: &MedNcaModel<f32>, image: &Tensor<f32>, key: &str, seed: u64, mode: EvalMode) -> Result<Tensor<f32>> {
    match mode {
        EvalMode::Single => {
            let mut rng = Rng::derive(seed, &[hash_str(key)]);
            let p = predict_probs(model, image, &mut rng)?;
            Ok(p.map(|v| if v > 0.5 { 1.0 } else { 0.0 }))
        }
        EvalMode::EnsembleMean { n_runs } => {
            let stats = ensemble_predict(model, image, n_runs, Rng::derive(seed, &[hash_str(key)]).next_u64())?;
            Ok(stats.mean.threshold(0.5))
        }
    }
}

/// Dice of every labeled sample. Per-sample streams are keyed by id, so
/// the result does not depend on sample order or thread count.
pub fn evaluate(model: &MedNcaModel<f32>, samples: &[SampleRecord], seed: u64, mode: EvalMode, model_id: &str) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate: no samples"));
    }
    let scores: Vec<SampleDice> = samples
        .par_iter()
        .map(|s| {
            let mask = s
                .mask
                .as_ref()
                .ok_or_else(|| Error::invalid(format!("sample {:?} has no mask", s.id)))?;
            let pred = predict_mask(model, &s.image, &s.id, seed, mode)?;
            Ok(SampleDice {
                id: s.id.clone(),
                dice: dice_metric(pred.data(), mask.data()),
            })
        })
        .collect::<Result<_>>()?;
    let values: Vec<f64> = scores.iter().map(|s| s.dice).collect();
    let (dice_mean, dice_std) = mean_std(&values);
    let domain = if samples.iter().all(|s| s.domain == samples[0].domain) {
        samples[0].domain.clone()
    } else {
        "mixed".into()
    };
    Ok(EvalReport {
        model: model_id.into(),
        domain,
        mode,
        seed,
        n: scores.len(),
        dice_mean,
        dice_std,
        samples: scores,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub model: String,
    pub train_domain: String,
    pub eval_domain: String,
    pub mode: String,
    pub dice_mean: f64,
    pub dice_std: f64,
    pub n: usize,
}

impl TableRow {
    pub fn from_report(r: &EvalReport, train_domain: &str) -> Self {
        TableRow {
            model: r.model.clone(),
            train_domain: train_domain.into(),
            eval_domain: r.domain.clone(),
            mode: r.mode.label(),
            dice_mean: r.dice_mean,
            dice_std: r.dice_std,
            n: r.n,
        }
    }
}

pub fn write_table(path: &Path, rows: &[TableRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Foreground pixels with a 4-neighbour outside the mask or the image.
pub fn boundary(mask: &[f32], h: usize, w: usize) -> Vec<bool> {
    let fg = |y: isize, x: isize| y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w && mask[y as usize * w + x as usize] > 0.5;
    let mut out = vec![false; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            if fg(y, x) && !(fg(y - 1, x) && fg(y + 1, x) && fg(y, x - 1) && fg(y, x + 1)) {
                out[y as usize * w + x as usize] = true;
            }
        }
    }
    out
}

/// The image with the reference contour (if any) and the prediction
/// contour burned in at [`TRUTH_CONTOUR_LEVEL`] and [`PRED_CONTOUR_LEVEL`].
pub fn export_overlay(image: &Tensor<f32>, pred: &Tensor<f32>, mask: Option<&Tensor<f32>>) -> GrayImage {
    let s = image.shape();
    let mut out = GrayImage::from_tensor(image);
    let mut burn = |m: &Tensor<f32>, level: u8| {
        for (o, b) in out.data.iter_mut().zip(boundary(m.plane(0, 0), s.h, s.w)) {
            if b {
                *o = level;
            }
        }
    };
    if let Some(m) = mask {
        burn(m, TRUTH_CONTOUR_LEVEL);
    }
    burn(pred, PRED_CONTOUR_LEVEL);
    out
}

/// Standard-deviation map scaled linearly from `[0, 0.5]` to `[0, 255]`.
pub fn std_map_image(std: &Tensor<f32>) -> GrayImage {
    let scaled = std.map(|v| v * 2.0);
    let s = std.shape();
    GrayImage {
        width: s.w,
        height: s.h,
        maxval: 255,
        data: scaled.plane(0, 0).iter().map(|&v| quantize(v)).collect(),
    }
}
