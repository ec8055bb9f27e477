//! The NCA cell rule and the two-level Med-NCA model.
//!
//! State layout per pixel: `[0, input_channels)` holds the image and is
//! re-pinned after every step, the next `output_channels` hold raw
//! segmentation logits, and the rest are hidden channels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BnMode, BnStats, NcaStepVars, ParamId, ResizeMode, Scalar, Shape, Tape, Tensor, Var};

/// Trainable tensors per cell, in checkpoint order (running stats excluded).
pub const PARAMS_PER_CELL: usize = 9;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Batch statistics, folded into the running statistics.
    Train,
    /// Stored running statistics.
    Eval,
    /// Statistics of the current input; running statistics are left alone.
    Batch,
}

/// BN mode for inference, ensembles and adaptation.
///
/// The running statistics are an average over every step of the rollout,
/// while training normalizes each step by its own statistics; per-input
/// statistics reproduce the training-time function, running ones do not.
pub const INFERENCE_MODE: Mode = Mode::Batch;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MedNcaConfig {
    pub channels: usize,
    pub hidden: usize,
    pub scale_factor: usize,
    pub steps_level1: usize,
    pub steps_level2: usize,
    pub fire_rate: f32,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl Default for MedNcaConfig {
    fn default() -> Self {
        MedNcaConfig {
            channels: 16,
            hidden: 128,
            scale_factor: 4,
            steps_level1: 32,
            steps_level2: 16,
            fire_rate: 0.5,
            input_channels: 1,
            output_channels: 1,
        }
    }
}

impl MedNcaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.hidden == 0 {
            return Err(Error::invalid("channels and hidden must be positive"));
        }
        if self.input_channels == 0 || self.output_channels == 0 {
            return Err(Error::invalid("input and output channel counts must be positive"));
        }
        if self.input_channels + self.output_channels > self.channels {
            return Err(Error::invalid(format!(
                "input_channels + output_channels ({}) exceeds channels ({})",
                self.input_channels + self.output_channels,
                self.channels
            )));
        }
        if self.scale_factor == 0 {
            return Err(Error::invalid("scale_factor must be positive"));
        }
        check_fire_rate(self.fire_rate)
    }

    pub fn check_image(&self, h: usize, w: usize) -> Result<()> {
        let s = self.scale_factor;
        if h == 0 || w == 0 || !h.is_multiple_of(s) || !w.is_multiple_of(s) {
            return Err(Error::invalid(format!(
                "image size {h}x{w} is not a positive multiple of scale_factor {s}"
            )));
        }
        Ok(())
    }

    /// Closed-form trainable parameter count of one cell.
    pub fn params_per_cell(&self) -> usize {
        let (c, h) = (self.channels, self.hidden);
        2 * (c * c * 9 + c) + (3 * c * h + h) + 2 * h + h * c
    }

    /// [`params_per_cell`](Self::params_per_cell) without overflow, for
    /// configs read from untrusted input.
    pub fn params_per_cell_checked(&self) -> Option<usize> {
        let (c, h) = (self.channels, self.hidden);
        let conv = c.checked_mul(c)?.checked_mul(9)?.checked_add(c)?.checked_mul(2)?;
        let fc0 = c.checked_mul(3)?.checked_mul(h)?.checked_add(h)?;
        let fc1 = h.checked_mul(c)?;
        conv.checked_add(fc0)?.checked_add(h.checked_mul(2)?)?.checked_add(fc1)
    }
}

fn check_fire_rate(fire_rate: f32) -> Result<()> {
    if !(fire_rate > 0.0 && fire_rate <= 1.0) {
        return Err(Error::invalid(format!("fire_rate {fire_rate} outside (0, 1]")));
    }
    Ok(())
}

/// Weights of one NCA level.
#[derive(Clone, Debug, PartialEq)]
pub struct NcaCellParams<T = f32> {
    pub perceive1_w: Tensor<T>,
    pub perceive1_b: Tensor<T>,
    pub perceive2_w: Tensor<T>,
    pub perceive2_b: Tensor<T>,
    pub fc0_w: Tensor<T>,
    pub fc0_b: Tensor<T>,
    pub bn_gamma: Tensor<T>,
    pub bn_beta: Tensor<T>,
    pub bn_stats: BnStats<T>,
    pub fc1_w: Tensor<T>,
}

impl<T: Scalar> NcaCellParams<T> {
    /// All-zero weights, unit BN scale, fresh running stats.
    pub fn zeros(channels: usize, hidden: usize) -> Self {
        let (c, h) = (channels, hidden);
        NcaCellParams {
            perceive1_w: Tensor::zeros(Shape::new(c, c, 3, 3)),
            perceive1_b: Tensor::zeros(Shape::channels(c)),
            perceive2_w: Tensor::zeros(Shape::new(c, c, 3, 3)),
            perceive2_b: Tensor::zeros(Shape::channels(c)),
            fc0_w: Tensor::zeros(Shape::new(h, 3 * c, 1, 1)),
            fc0_b: Tensor::zeros(Shape::channels(h)),
            bn_gamma: Tensor::ones(Shape::channels(h)),
            bn_beta: Tensor::zeros(Shape::channels(h)),
            bn_stats: BnStats::new(h),
            fc1_w: Tensor::zeros(Shape::new(c, h, 1, 1)),
        }
    }

    pub fn trainable(&self) -> [&Tensor<T>; PARAMS_PER_CELL] {
        [
            &self.perceive1_w,
            &self.perceive1_b,
            &self.perceive2_w,
            &self.perceive2_b,
            &self.fc0_w,
            &self.fc0_b,
            &self.bn_gamma,
            &self.bn_beta,
            &self.fc1_w,
        ]
    }

    pub fn trainable_mut(&mut self) -> [&mut Tensor<T>; PARAMS_PER_CELL] {
        [
            &mut self.perceive1_w,
            &mut self.perceive1_b,
            &mut self.perceive2_w,
            &mut self.perceive2_b,
            &mut self.fc0_w,
            &mut self.fc0_b,
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.fc1_w,
        ]
    }

    pub fn count(&self) -> usize {
        self.trainable().iter().map(|t| t.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> NcaCellParams<U> {
        let stats = BnStats {
            mean: self.bn_stats.mean.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            var: self.bn_stats.var.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
        };
        NcaCellParams {
            perceive1_w: self.perceive1_w.cast(),
            perceive1_b: self.perceive1_b.cast(),
            perceive2_w: self.perceive2_w.cast(),
            perceive2_b: self.perceive2_b.cast(),
            fc0_w: self.fc0_w.cast(),
            fc0_b: self.fc0_b.cast(),
            bn_gamma: self.bn_gamma.cast(),
            bn_beta: self.bn_beta.cast(),
            bn_stats: stats,
            fc1_w: self.fc1_w.cast(),
        }
    }

    /// Registers this cell's trainable tensors on `tape` as parameters
    /// `level * PARAMS_PER_CELL + slot`.
    pub fn register(&self, tape: &mut Tape<T>, level: usize) -> CellVars {
        let mut vars = self
            .trainable()
            .into_iter()
            .enumerate()
            .map(|(slot, t)| tape.param(param_id(level, slot), t.clone()));
        let mut next = || vars.next().unwrap();
        CellVars {
            perceive1_w: next(),
            perceive1_b: next(),
            perceive2_w: next(),
            perceive2_b: next(),
            fc0_w: next(),
            fc0_b: next(),
            bn_gamma: next(),
            bn_beta: next(),
            fc1_w: next(),
        }
    }
}

pub fn param_id(level: usize, slot: usize) -> ParamId {
    ParamId(level * PARAMS_PER_CELL + slot)
}

/// Tape handles for one cell's trainable tensors.
pub type CellVars = NcaStepVars;

/// Bernoulli(`fire_rate`) mask of shape `[n, 1, h, w]`.
pub fn fire_mask<T: Scalar>(n: usize, h: usize, w: usize, fire_rate: f32, rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(Shape::new(n, 1, h, w), |_, _, _, _| {
        if rng.bernoulli(fire_rate) {
            T::one()
        } else {
            T::zero()
        }
    })
}

/// One stochastic update of every cell.
///
/// `image` holds the values of the leading, pinned channels. Only `Train`
/// mode writes `running`.
#[allow(clippy::too_many_arguments)]
pub fn cell_step<T: Scalar>(
    tape: &mut Tape<T>,
    state: Var,
    image: &Tensor<T>,
    cell: &CellVars,
    running: &mut BnStats<T>,
    fire_rate: f32,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    check_fire_rate(fire_rate)?;
    let s = tape.shape(state);
    let mask = (fire_rate < 1.0).then(|| fire_mask(s.n, s.h, s.w, fire_rate, rng));
    let eps = T::from_f64_lossy(BN_EPS);
    let bn = match mode {
        Mode::Train => BnMode::Train {
            running,
            momentum: T::from_f64_lossy(BN_MOMENTUM),
        },
        Mode::Eval => BnMode::Eval { running },
        Mode::Batch => BnMode::Batch,
    };
    tape.nca_step(state, cell, bn, eps, mask.as_ref(), image)
}

/// [`cell_step`] assembled from primitive tape ops. Slower and far more
/// memory hungry; kept as the reference the fused op is tested against.
#[allow(clippy::too_many_arguments)]
pub fn cell_step_reference<T: Scalar>(
    tape: &mut Tape<T>,
    state: Var,
    image: &Tensor<T>,
    cell: &CellVars,
    running: &mut BnStats<T>,
    fire_rate: f32,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    check_fire_rate(fire_rate)?;
    let s = tape.shape(state);
    let p1 = tape.conv2d_3x3(state, cell.perceive1_w, cell.perceive1_b)?;
    let p2 = tape.conv2d_3x3(state, cell.perceive2_w, cell.perceive2_b)?;
    let x = tape.concat_channels(&[state, p1, p2])?;
    let hdn = tape.dense_1x1(x, cell.fc0_w, Some(cell.fc0_b))?;
    let eps = T::from_f64_lossy(BN_EPS);
    let bn = match mode {
        Mode::Train => BnMode::Train {
            running,
            momentum: T::from_f64_lossy(BN_MOMENTUM),
        },
        Mode::Eval => BnMode::Eval { running },
        Mode::Batch => BnMode::Batch,
    };
    let hdn = tape.batch_norm(hdn, cell.bn_gamma, cell.bn_beta, bn, eps)?;
    let hdn = tape.relu(hdn)?;
    let mut delta = tape.dense_1x1(hdn, cell.fc1_w, None)?;
    if fire_rate < 1.0 {
        let mask = fire_mask(s.n, s.h, s.w, fire_rate, rng);
        delta = tape.mask_pixels(delta, &mask)?;
    }
    let next = tape.add(state, delta)?;
    tape.pin_channels(next, image)
}

/// `steps` consecutive [`cell_step`]s drawing masks from one stream.
#[allow(clippy::too_many_arguments)]
pub fn rollout<T: Scalar>(
    tape: &mut Tape<T>,
    mut state: Var,
    image: &Tensor<T>,
    cell: &CellVars,
    running: &mut BnStats<T>,
    steps: usize,
    fire_rate: f32,
    rng: &mut Rng,
    mode: Mode,
) -> Result<Var> {
    let mark = tape.mark();
    for _ in 0..steps {
        state = cell_step(tape, state, image, cell, running, fire_rate, rng, mode)?;
        if !tape.grad_enabled() {
            state = tape.compact(mark, state)?;
        }
    }
    Ok(state)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MedNcaModel<T = f32> {
    pub config: MedNcaConfig,
    pub level1: NcaCellParams<T>,
    pub level2: NcaCellParams<T>,
}

/// Tape handles for both levels.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub level1: CellVars,
    pub level2: CellVars,
}

pub struct ForwardOutput<T> {
    /// `[n, output_channels, h / s, w / s]`
    pub logits_l1: Var,
    /// `[n, output_channels, h, w]` (or the patch size for patch forwards)
    pub logits_l2: Var,
    /// Running statistics after the pass (only changed in `Train` mode).
    pub bn_stats: [BnStats<T>; 2],
}

pub struct PatchOutput<T> {
    pub logits_l1: Var,
    pub target_l1: Tensor<T>,
    pub logits_l2: Var,
    pub target_l2: Tensor<T>,
    pub offset: (usize, usize),
    pub bn_stats: [BnStats<T>; 2],
}

impl<T: Scalar> MedNcaModel<T> {
    pub fn zeros(config: MedNcaConfig) -> Result<Self> {
        config.validate()?;
        Ok(MedNcaModel {
            level1: NcaCellParams::zeros(config.channels, config.hidden),
            level2: NcaCellParams::zeros(config.channels, config.hidden),
            config,
        })
    }

    /// `uniform(-k, k)` with `k = 1 / sqrt(fan_in)` for convolutions and
    /// the first dense layer (weights and biases); the final dense layer
    /// starts at zero so an untrained step leaves the state unchanged.
    pub fn initialize(config: MedNcaConfig, rng: &mut Rng) -> Result<Self> {
        let mut model = Self::zeros(config)?;
        let c = model.config.channels;
        for cell in [&mut model.level1, &mut model.level2] {
            let k_conv = 1.0 / ((c * 9) as f64).sqrt();
            let k_fc0 = 1.0 / ((3 * c) as f64).sqrt();
            for (t, k) in [
                (&mut cell.perceive1_w, k_conv),
                (&mut cell.perceive1_b, k_conv),
                (&mut cell.perceive2_w, k_conv),
                (&mut cell.perceive2_b, k_conv),
                (&mut cell.fc0_w, k_fc0),
                (&mut cell.fc0_b, k_fc0),
            ] {
                for v in t.data_mut() {
                    *v = T::from_f64_lossy(rng.uniform_range(-k, k));
                }
            }
        }
        Ok(model)
    }

    pub fn count_parameters(&self) -> usize {
        self.level1.count() + self.level2.count()
    }

    pub fn cells(&self) -> [&NcaCellParams<T>; 2] {
        [&self.level1, &self.level2]
    }

    /// Trainable tensors of both levels in [`ParamId`] order.
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let [a, b] = [&mut self.level1, &mut self.level2];
        a.trainable_mut().into_iter().chain(b.trainable_mut()).collect()
    }

    pub fn trainable(&self) -> Vec<&Tensor<T>> {
        self.level1.trainable().into_iter().chain(self.level2.trainable()).collect()
    }

    pub fn parameter_norm(&self) -> f64 {
        self.trainable().iter().map(|t| t.l2_norm().powi(2)).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.trainable().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> MedNcaModel<U> {
        MedNcaModel {
            config: self.config.clone(),
            level1: self.level1.cast(),
            level2: self.level2.cast(),
        }
    }

    pub fn register(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            level1: self.level1.register(tape, 0),
            level2: self.level2.register(tape, 1),
        }
    }

    /// Replace running statistics with the ones reported by a forward pass.
    pub fn set_bn_stats(&mut self, stats: [BnStats<T>; 2]) {
        let [a, b] = stats;
        self.level1.bn_stats = a;
        self.level2.bn_stats = b;
    }

    fn seed_state(&self, image: &Tensor<T>) -> Tensor<T> {
        let s = image.shape();
        let c = self.config.channels;
        Tensor::from_fn(Shape::new(s.n, c, s.h, s.w), |n, ch, y, x| {
            if ch < s.c {
                image.at(n, ch, y, x)
            } else {
                T::zero()
            }
        })
    }

    fn check_input(&self, image: &Tensor<T>) -> Result<()> {
        let s = image.shape();
        if s.c != self.config.input_channels {
            return Err(Error::shape("forward", "input channels", self.config.input_channels, s.c));
        }
        if s.n == 0 {
            return Err(Error::invalid("forward: empty batch"));
        }
        self.config.check_image(s.h, s.w)
    }

    fn level1(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        image: &Tensor<T>,
        rng: &mut Rng,
        mode: Mode,
        running: &mut BnStats<T>,
    ) -> Result<Var> {
        let s = image.shape();
        let f = self.config.scale_factor;
        let small = crate::tensor::resample(image, s.h / f, s.w / f, ResizeMode::Bilinear)?;
        let state = tape.constant(self.seed_state(&small));
        rollout(
            tape,
            state,
            &small,
            &vars.level1,
            running,
            self.config.steps_level1,
            self.config.fire_rate,
            rng,
            mode,
        )
    }

    /// Full two-level pass. `image: [n, input_channels, h, w]` with `h`, `w`
    /// divisible by the scale factor.
    pub fn forward(&self, tape: &mut Tape<T>, image: &Tensor<T>, rng: &mut Rng, mode: Mode) -> Result<ForwardOutput<T>> {
        let vars = self.register(tape);
        self.forward_with(tape, &vars, image, rng, mode)
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        image: &Tensor<T>,
        rng: &mut Rng,
        mode: Mode,
    ) -> Result<ForwardOutput<T>> {
        self.check_input(image)?;
        let s = image.shape();
        let (ic, oc) = (self.config.input_channels, self.config.output_channels);
        let mut run1 = self.level1.bn_stats.clone();
        let mut run2 = self.level2.bn_stats.clone();
        let state1 = self.level1(tape, vars, image, rng, mode, &mut run1)?;
        let logits_l1 = tape.narrow_channels(state1, ic, oc)?;
        let up = tape.resample(state1, s.h, s.w, ResizeMode::Bilinear)?;
        let up = tape.pin_channels(up, image)?;
        let state2 = rollout(
            tape,
            up,
            image,
            &vars.level2,
            &mut run2,
            self.config.steps_level2,
            self.config.fire_rate,
            rng,
            mode,
        )?;
        let logits_l2 = tape.narrow_channels(state2, ic, oc)?;
        Ok(ForwardOutput {
            logits_l1,
            logits_l2,
            bn_stats: [run1, run2],
        })
    }

    /// Training pass that runs level 2 on a random `patch_size` square of
    /// the upsampled state. `mask: [n, output_channels, h, w]`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward_training_patch(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        image: &Tensor<T>,
        mask: &Tensor<T>,
        rng: &mut Rng,
        patch_size: usize,
        mode: Mode,
    ) -> Result<PatchOutput<T>> {
        self.check_input(image)?;
        let s = image.shape();
        mask.expect_shape("forward_training_patch mask", Shape::new(s.n, self.config.output_channels, s.h, s.w))?;
        check_patch(patch_size, s.h, s.w)?;
        let oy = draw_offset(rng, s.h - patch_size + 1);
        let ox = draw_offset(rng, s.w - patch_size + 1);
        let out = self.forward_patch_at(tape, vars, image, rng, (oy, ox), patch_size, mode)?;
        Ok(PatchOutput {
            logits_l1: out.logits_l1,
            target_l1: level1_target(mask, self.config.scale_factor)?,
            logits_l2: out.logits_l2,
            target_l2: mask.crop(oy, ox, patch_size, patch_size)?,
            offset: (oy, ox),
            bn_stats: out.bn_stats,
        })
    }

    /// Level 1 on the whole image, level 2 on the `patch_size` square at
    /// `offset = (y, x)`. A patch covering the image equals [`forward`](Self::forward).
    #[allow(clippy::too_many_arguments)]
    pub fn forward_patch_at(
        &self,
        tape: &mut Tape<T>,
        vars: &ModelVars,
        image: &Tensor<T>,
        rng: &mut Rng,
        offset: (usize, usize),
        patch_size: usize,
        mode: Mode,
    ) -> Result<ForwardOutput<T>> {
        self.check_input(image)?;
        let s = image.shape();
        check_patch(patch_size, s.h, s.w)?;
        let (oy, ox) = offset;
        if oy + patch_size > s.h || ox + patch_size > s.w {
            return Err(Error::invalid(format!("patch at ({oy}, {ox}) leaves the {}x{} image", s.h, s.w)));
        }
        let (ic, oc) = (self.config.input_channels, self.config.output_channels);
        let mut run1 = self.level1.bn_stats.clone();
        let mut run2 = self.level2.bn_stats.clone();
        let state1 = self.level1(tape, vars, image, rng, mode, &mut run1)?;
        let logits_l1 = tape.narrow_channels(state1, ic, oc)?;
        let up = tape.resample(state1, s.h, s.w, ResizeMode::Bilinear)?;
        let up = tape.crop(up, oy, ox, patch_size, patch_size)?;
        let img_patch = image.crop(oy, ox, patch_size, patch_size)?;
        let up = tape.pin_channels(up, &img_patch)?;
        let state2 = rollout(
            tape,
            up,
            &img_patch,
            &vars.level2,
            &mut run2,
            self.config.steps_level2,
            self.config.fire_rate,
            rng,
            mode,
        )?;
        let logits_l2 = tape.narrow_channels(state2, ic, oc)?;
        Ok(ForwardOutput {
            logits_l1,
            logits_l2,
            bn_stats: [run1, run2],
        })
    }
}

fn check_patch(patch_size: usize, h: usize, w: usize) -> Result<()> {
    if patch_size == 0 || patch_size > h || patch_size > w {
        return Err(Error::invalid(format!("patch size {patch_size} does not fit a {h}x{w} image")));
    }
    Ok(())
}

fn draw_offset(rng: &mut Rng, range: usize) -> usize {
    if range > 1 {
        rng.below(range as u64) as usize
    } else {
        0
    }
}

/// Low-resolution target: bilinear downsample, re-binarized at 0.5.
pub fn level1_target<T: Scalar>(mask: &Tensor<T>, scale_factor: usize) -> Result<Tensor<T>> {
    let s = mask.shape();
    let small = crate::tensor::resample(mask, s.h / scale_factor, s.w / scale_factor, ResizeMode::Bilinear)?;
    Ok(small.threshold(T::from_f64_lossy(0.5)))
}
