//! Segmentation losses on the tape.
//!
//! All functions take sigmoid probabilities, not logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{resample, Axes, ResizeMode, Scalar, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub focal_gamma: f64,
    pub focal_alpha: f64,
    pub smooth_eps: f64,
    pub vwsl_gamma: f64,
    pub weight_clamp: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            focal_gamma: 2.0,
            focal_alpha: 1.0,
            smooth_eps: 1e-6,
            vwsl_gamma: 1e3,
            weight_clamp: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.focal_gamma >= 0.0) {
            return Err(Error::invalid("focal_gamma must be >= 0"));
        }
        if !(self.smooth_eps > 0.0) {
            return Err(Error::invalid("smooth_eps must be > 0"));
        }
        if !(self.vwsl_gamma >= 0.0) {
            return Err(Error::invalid("vwsl_gamma must be >= 0"));
        }
        Ok(())
    }
}

/// Per-pixel confidence weights `clamp(1 - 2σ, 0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VarianceWeights<T = f32> {
    pub w: Tensor<T>,
}

impl<T: Scalar> VarianceWeights<T> {
    pub fn from_std(std: &Tensor<T>, clamp: bool) -> Self {
        let two = T::from_f64_lossy(2.0);
        VarianceWeights {
            w: std.map(|s| {
                let w = T::one() - two * s;
                if clamp {
                    w.max(T::zero()).min(T::one())
                } else {
                    w
                }
            }),
        }
    }

    /// Bilinear downsample by `factor`, used for the level-1 loss.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        let s = self.w.shape();
        Ok(VarianceWeights {
            w: resample(&self.w, s.h / factor, s.w / factor, ResizeMode::Bilinear)?,
        })
    }
}

/// Weighted soft Dice coefficient (not the loss).
pub fn soft_dice<T: Scalar>(tape: &mut Tape<T>, p: Var, t: &Tensor<T>, w: Option<&VarianceWeights<T>>, eps: f64) -> Result<Var> {
    tape.soft_dice(p, t, w.map(|w| &w.w), T::from_f64_lossy(eps))
}

pub fn focal_loss<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    t: &Tensor<T>,
    w: Option<&VarianceWeights<T>>,
    alpha: f64,
    gamma: f64,
) -> Result<Var> {
    tape.focal(p, t, w.map(|w| &w.w), T::from_f64_lossy(alpha), T::from_f64_lossy(gamma))
}

/// Mean absolute difference.
pub fn consistency_l1<T: Scalar>(tape: &mut Tape<T>, o1: Var, o2: Var) -> Result<Var> {
    let d = tape.sub(o1, o2)?;
    let d = tape.abs(d)?;
    tape.mean(d, Axes::ALL)
}

/// `(1 - DSC_w) + focal_w` for one level.
fn segmentation_term<T: Scalar>(
    tape: &mut Tape<T>,
    p: Var,
    t: &Tensor<T>,
    w: Option<&VarianceWeights<T>>,
    cfg: &LossConfig,
) -> Result<Var> {
    let dsc = soft_dice(tape, p, t, w, cfg.smooth_eps)?;
    let dice_loss = tape.scalar_mul(dsc, -T::one())?;
    let dice_loss = tape.scalar_add(dice_loss, T::one())?;
    let focal = focal_loss(tape, p, t, w, cfg.focal_alpha, cfg.focal_gamma)?;
    tape.add(dice_loss, focal)
}

/// `Σ_levels (1 - DSC) + focal`, unweighted. `probs` and `targets` are
/// ordered level 1, level 2.
pub fn supervised_loss<T: Scalar>(tape: &mut Tape<T>, probs: [Var; 2], targets: [&Tensor<T>; 2], cfg: &LossConfig) -> Result<Var> {
    let a = segmentation_term(tape, probs[0], targets[0], None, cfg)?;
    let b = segmentation_term(tape, probs[1], targets[1], None, cfg)?;
    tape.add(a, b)
}

/// Two stochastic outputs of the same level.
#[derive(Clone, Copy, Debug)]
pub struct OutputPair {
    pub o1: Var,
    pub o2: Var,
}

/// Surrogate supervision for one level.
pub struct LevelTarget<'a, T> {
    pub target: &'a Tensor<T>,
    pub weights: &'a VarianceWeights<T>,
}

/// Variance-weighted segmentation loss summed over levels:
/// `(1 - DSC_w(o1, y)) + focal_w(o1, y) + γ · L1(o1, o2)`.
///
/// Only `o1` is compared with the surrogate; `o2` enters through the
/// consistency term alone.
pub fn vwsl<T: Scalar>(tape: &mut Tape<T>, outputs: &[OutputPair], targets: &[LevelTarget<'_, T>], cfg: &LossConfig) -> Result<Var> {
    if outputs.is_empty() || outputs.len() != targets.len() {
        return Err(Error::invalid(format!(
            "vwsl needs one surrogate per level: {} outputs, {} targets",
            outputs.len(),
            targets.len()
        )));
    }
    let mut total: Option<Var> = None;
    for (pair, lt) in outputs.iter().zip(targets) {
        let seg = segmentation_term(tape, pair.o1, lt.target, Some(lt.weights), cfg)?;
        let l1 = consistency_l1(tape, pair.o1, pair.o2)?;
        let l1 = tape.scalar_mul(l1, T::from_f64_lossy(cfg.vwsl_gamma))?;
        let level = tape.add(seg, l1)?;
        total = Some(match total {
            None => level,
            Some(t) => tape.add(t, level)?,
        });
    }
    Ok(total.unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn probs(tape: &mut Tape<f64>, v: &[f64]) -> Var {
        tape.constant(Tensor::from_vec(Shape::new(1, 1, 1, v.len()), v.to_vec()).unwrap())
    }

    #[test]
    fn focal_reference_values() {
        let mut tape = Tape::<f64>::new();
        let p = probs(&mut tape, &[0.5, 0.5]);
        let t = Tensor::ones(Shape::new(1, 1, 1, 2));
        let v = focal_loss(&mut tape, p, &t, None, 1.0, 0.0).unwrap();
        assert!((tape.value(v).data()[0] - 2f64.ln()).abs() < 1e-12);

        let p = probs(&mut tape, &[0.9]);
        let t = Tensor::ones(Shape::new(1, 1, 1, 1));
        let v = focal_loss(&mut tape, p, &t, None, 1.0, 2.0).unwrap();
        let expected = 0.01 * -(0.9f64.ln());
        assert!((tape.value(v).data()[0] - expected).abs() < 1e-12);
        assert!((expected - 1.054e-3).abs() < 1e-6);
    }

    #[test]
    fn weighted_dice_identity_with_zeroed_half() {
        let mut tape = Tape::<f64>::new();
        let vals: Vec<f64> = (0..16).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let t = Tensor::from_vec(Shape::new(1, 1, 4, 4), vals.clone()).unwrap();
        let p = tape.constant(t.clone());
        let w = VarianceWeights {
            w: Tensor::from_fn(Shape::new(1, 1, 4, 4), |_, _, y, _| if y < 2 { 0.0 } else { 1.0 }),
        };
        let d = soft_dice(&mut tape, p, &t, Some(&w), 1e-6).unwrap();
        assert!((tape.value(d).data()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn weights_clamp_and_monotone() {
        let std = Tensor::from_vec(Shape::new(1, 1, 1, 4), vec![0.0, 0.1, 0.5, 0.7]).unwrap();
        let w = VarianceWeights::from_std(&std, true);
        assert_eq!(w.w.data(), &[1.0, 0.8, 0.0, 0.0]);
        let raw = VarianceWeights::from_std(&std, false);
        assert!((raw.w.data()[3] + 0.4f64).abs() < 1e-12);
    }

    #[test]
    fn vwsl_rejects_mismatched_levels() {
        let mut tape = Tape::<f64>::new();
        let p = probs(&mut tape, &[0.5]);
        let pair = OutputPair { o1: p, o2: p };
        assert!(vwsl(&mut tape, &[pair], &[], &LossConfig::default()).is_err());
    }
}
