//! Measurement loops shared by the unit tests and the acceptance run: each
//! returns the worst observed error so callers pick their own verdict.

use mednca::adapter::EnsembleStats;
use mednca::losses::{vwsl, LevelTarget, LossConfig, OutputPair, VarianceWeights};
use mednca::nca::{param_id, MedNcaConfig, MedNcaModel, Mode, PARAMS_PER_CELL};
use mednca::optim::{adam_step, AdamHyper, AdamState};
use mednca::rng::Rng;
use mednca::tensor::{resample, ResizeMode, Shape, Tape, Tensor, Var};

/// The γ = 10³ consistency term makes the composite loss steep, so a ±1e-6
/// step can cross an |·| or ReLU kink somewhere in the 48-step rollout.
pub const H_MODEL: f64 = 1e-7;

/// Some groups have an identically zero gradient (a per-channel constant
/// ahead of batch-statistics BN cancels), where a group-relative error is
/// just rounding noise over zero. Errors are therefore taken relative to
/// `max(‖group‖, SCALE_FLOOR · ‖all groups‖)`.
pub const SCALE_FLOOR: f64 = 1e-3;

pub fn global_norm<'a>(groups: impl Iterator<Item = &'a [f64]>) -> f64 {
    groups.flat_map(|g| g.iter()).map(|v| v * v).sum::<f64>().sqrt()
}

fn rand_f32(rng: &mut Rng, shape: Shape, lo: f64, hi: f64) -> Tensor<f32> {
    super::random_tensor(rng, shape, lo, hi).cast()
}

fn max_diff(a: &Tensor<f32>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y).abs())
        .fold(0.0, f64::max)
}

pub fn conv_worst(cases: usize) -> f64 {
    let mut rng = Rng::new(100);
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        let n = 1 + rng.below(2) as usize;
        let cin = 1 + rng.below(3) as usize;
        let cout = 1 + rng.below(3) as usize;
        let h = 1 + rng.below(7) as usize;
        let w = 1 + rng.below(7) as usize;
        let x = rand_f32(&mut rng, Shape::new(n, cin, h, w), -1.0, 1.0);
        let k = rand_f32(&mut rng, Shape::new(cout, cin, 3, 3), -1.0, 1.0);
        let b = rand_f32(&mut rng, Shape::channels(cout), -1.0, 1.0);
        let mut tape = Tape::<f32>::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.conv2d_3x3(xv, kv, bv).unwrap();
        let oracle = super::conv3x3(&x.cast(), &k.cast(), &b.cast());
        worst = worst.max(max_diff(tape.value(y), &oracle));
    }
    worst
}

/// Dense layer against the oracle and against a 3x3 conv whose only
/// non-zero tap is the centre.
pub fn dense_worst(cases: usize) -> f64 {
    let mut rng = Rng::new(101);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let n = 1 + rng.below(2) as usize;
        let cin = 1 + rng.below(8) as usize;
        let cout = 1 + rng.below(8) as usize;
        let (h, w) = (1 + rng.below(5) as usize, 1 + rng.below(5) as usize);
        let x = rand_f32(&mut rng, Shape::new(n, cin, h, w), -1.0, 1.0);
        let k = rand_f32(&mut rng, Shape::new(cout, cin, 1, 1), -1.0, 1.0);
        let b = rand_f32(&mut rng, Shape::channels(cout), -1.0, 1.0);
        let with_bias = case % 2 == 0;
        let mut tape = Tape::<f32>::new();
        let (xv, kv, bv) = (tape.constant(x.clone()), tape.constant(k.clone()), tape.constant(b.clone()));
        let y = tape.dense_1x1(xv, kv, with_bias.then_some(bv)).unwrap();
        let bb = b.cast::<f64>();
        let oracle = super::dense(&x.cast(), &k.cast(), with_bias.then_some(&bb));
        worst = worst.max(max_diff(tape.value(y), &oracle));

        let mut k3 = Tensor::<f64>::zeros(Shape::new(cout, cin, 3, 3));
        for o in 0..cout {
            for i in 0..cin {
                k3.set(o, i, 1, 1, k.at(o, i, 0, 0) as f64);
            }
        }
        let zero = Tensor::<f64>::zeros(Shape::channels(cout));
        let via_conv = super::conv3x3(&x.cast(), &k3, if with_bias { &bb } else { &zero });
        worst = worst.max(max_diff(tape.value(y), &via_conv));
    }
    worst
}

/// `(bilinear worst, nearest worst)`; the first third of the cases are
/// exact 2× upsamples.
pub fn resample_worst(cases: usize) -> (f64, f64) {
    let mut rng = Rng::new(102);
    let mut worst_bilinear: f64 = 0.0;
    let mut worst_nearest: f64 = 0.0;
    for case in 0..cases {
        let (h, w) = (1 + rng.below(9) as usize, 1 + rng.below(9) as usize);
        let (oh, ow) = if case < cases / 3 {
            (2 * h, 2 * w)
        } else {
            (1 + rng.below(12) as usize, 1 + rng.below(12) as usize)
        };
        let x = rand_f32(&mut rng, Shape::new(1, 2, h, w), 0.0, 1.0);
        let b = resample(&x, oh, ow, ResizeMode::Bilinear).unwrap();
        worst_bilinear = worst_bilinear.max(max_diff(&b, &super::bilinear(&x.cast(), oh, ow)));
        let nn = resample(&x, oh, ow, ResizeMode::Nearest).unwrap();
        worst_nearest = worst_nearest.max(max_diff(&nn, &super::nearest(&x.cast(), oh, ow)));
    }
    (worst_bilinear, worst_nearest)
}

/// `(worst error, every std in [0, 0.5])`.
pub fn ensemble_worst(cases: usize) -> (f64, bool) {
    let mut rng = Rng::new(104);
    let mut worst: f64 = 0.0;
    let mut in_range = true;
    for _ in 0..cases {
        let n_runs = 2 + rng.below(11) as usize;
        let shape = Shape::new(1, 1, 1 + rng.below(6) as usize, 1 + rng.below(6) as usize);
        let runs: Vec<Tensor<f32>> = (0..n_runs).map(|_| rand_f32(&mut rng, shape, 0.0, 1.0)).collect();
        let stats = EnsembleStats::from_runs(&runs).unwrap();
        let stored: Vec<Vec<f64>> = runs.iter().map(|r| r.data().iter().map(|&v| v as f64).collect()).collect();
        let (mean, std) = super::ensemble(&stored);
        for i in 0..shape.numel() {
            worst = worst.max((stats.mean.data()[i] as f64 - mean[i]).abs());
            worst = worst.max((stats.std.data()[i] as f64 - std[i]).abs());
        }
        in_range &= stats.std.data().iter().all(|&s| (0.0..=0.5).contains(&s));
    }
    (worst, in_range)
}

pub fn adam_worst(cases: usize) -> f64 {
    let mut rng = Rng::new(105);
    let mut worst: f64 = 0.0;
    for case in 0..cases {
        let steps = if case < 20 { 3 } else { 1 + rng.below(12) as usize };
        let len = 1 + rng.below(5) as usize;
        let hyper = AdamHyper {
            beta1: rng.uniform_range(0.5, 0.95),
            beta2: rng.uniform_range(0.9, 0.999),
            eps: 1e-8,
        };
        let lr = rng.uniform_range(1e-4, 1e-1);
        let p0: Vec<f64> = (0..len).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let grads: Vec<Vec<f64>> = (0..steps).map(|_| (0..len).map(|_| rng.uniform_range(-2.0, 2.0)).collect()).collect();
        let mut p = p0.clone();
        let mut state = AdamState::new(len);
        for g in &grads {
            adam_step(&mut p, g, &mut state, lr, hyper);
        }
        assert_eq!(state.t, steps as u64);
        for i in 0..len {
            let gi: Vec<f64> = grads.iter().map(|g| g[i]).collect();
            let expect = super::adam_scalar(p0[i], &gi, lr, hyper.beta1, hyper.beta2, hyper.eps);
            worst = worst.max((p[i] - expect).abs());
        }
    }
    worst
}

/// Default-architecture model with every weight non-trivial.
pub fn test_model(seed: u64) -> MedNcaModel<f64> {
    let mut rng = Rng::new(seed);
    let mut m = MedNcaModel::<f64>::initialize(MedNcaConfig::default(), &mut rng).unwrap();
    for cell in [&mut m.level1, &mut m.level2] {
        for v in cell.fc1_w.data_mut() {
            *v = rng.uniform_range(-0.05, 0.05);
        }
        for v in cell.bn_gamma.data_mut() {
            *v = rng.uniform_range(0.8, 1.2);
        }
        for v in cell.bn_beta.data_mut() {
            *v = rng.uniform_range(-0.1, 0.1);
        }
    }
    m
}

struct VwslCase {
    image: Tensor<f64>,
    targets: [Tensor<f64>; 2],
    weights: [VarianceWeights<f64>; 2],
    cfg: LossConfig,
}

impl VwslCase {
    fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let image = super::random_tensor(&mut rng, Shape::new(1, 1, 16, 16), 0.0, 1.0);
        let t2 = super::random_tensor(&mut rng, Shape::new(1, 1, 16, 16), 0.0, 1.0).threshold(0.5);
        let t1 = super::random_tensor(&mut rng, Shape::new(1, 1, 4, 4), 0.0, 1.0).threshold(0.5);
        let s2 = super::random_tensor(&mut rng, Shape::new(1, 1, 16, 16), 0.0, 0.5);
        let s1 = super::random_tensor(&mut rng, Shape::new(1, 1, 4, 4), 0.0, 0.5);
        VwslCase {
            image,
            targets: [t1, t2],
            weights: [VarianceWeights::from_std(&s1, true), VarianceWeights::from_std(&s2, true)],
            cfg: LossConfig::default(),
        }
    }

    /// Two independent stochastic passes, VWSL over both levels.
    fn loss(&self, model: &MedNcaModel<f64>, tape: &mut Tape<f64>) -> Var {
        let vars = model.register(tape);
        let mut pairs = Vec::new();
        let a = model.forward_with(tape, &vars, &self.image, &mut Rng::new(11), Mode::Batch).unwrap();
        let b = model.forward_with(tape, &vars, &self.image, &mut Rng::new(12), Mode::Batch).unwrap();
        for (la, lb) in [(a.logits_l1, b.logits_l1), (a.logits_l2, b.logits_l2)] {
            let o1 = tape.sigmoid(la).unwrap();
            let o2 = tape.sigmoid(lb).unwrap();
            pairs.push(OutputPair { o1, o2 });
        }
        let targets: Vec<LevelTarget<'_, f64>> = (0..2)
            .map(|l| LevelTarget {
                target: &self.targets[l],
                weights: &self.weights[l],
            })
            .collect();
        vwsl(tape, &pairs, &targets, &self.cfg).unwrap()
    }
}

/// Full two-level model + VWSL on a 16×16 input. Returns the relative
/// error of every parameter group, checked on `per_group` random
/// coordinates, labelled `level/slot`.
pub fn model_vwsl_errors(per_group: usize) -> Vec<(String, f64)> {
    let model = test_model(21);
    let case = VwslCase::new(22);
    let mut tape = Tape::<f64>::new();
    let loss = case.loss(&model, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let ids: Vec<_> = (0..2).flat_map(|l| (0..PARAMS_PER_CELL).map(move |s| param_id(l, s))).collect();
    let floor = SCALE_FLOOR * global_norm(ids.iter().map(|&id| grads.get(id).unwrap().data()));
    let mut rng = Rng::new(23);
    let mut out = Vec::new();
    for level in 0..2 {
        for slot in 0..PARAMS_PER_CELL {
            let g = grads.get(param_id(level, slot)).unwrap();
            let n = g.numel();
            let picks: Vec<usize> = (0..n.min(per_group)).map(|_| rng.below(n as u64) as usize).collect();
            let analytic: Vec<f64> = picks.iter().map(|&i| g.data()[i]).collect();
            let numeric: Vec<f64> = picks
                .iter()
                .map(|&i| {
                    let eval = |delta: f64| {
                        let mut m = model.clone();
                        m.trainable_mut()[level * PARAMS_PER_CELL + slot].data_mut()[i] += delta;
                        let mut tape = Tape::<f64>::inference();
                        let l = case.loss(&m, &mut tape);
                        tape.value(l).data()[0]
                    };
                    (eval(H_MODEL) - eval(-H_MODEL)) / (2.0 * H_MODEL)
                })
                .collect();
            out.push((format!("level{}/{slot}", level + 1), super::rel_error(&analytic, &numeric, floor)));
        }
    }
    out
}
