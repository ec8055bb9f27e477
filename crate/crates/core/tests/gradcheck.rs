//! Reverse-mode gradients against central finite differences in `f64`.

mod common;

use common::checks::{self, global_norm, test_model, SCALE_FLOOR};
use mednca::losses::LossConfig;
use mednca::nca::{param_id, MedNcaModel, Mode, PARAMS_PER_CELL};
use mednca::rng::Rng;
use mednca::tensor::{Axes, BnMode, BnStats, NcaStepVars, ParamId, ResizeMode, Shape, Tape, Tensor, Var};

const H: f64 = 1e-6;
const OP_TOL: f64 = 1e-6;

/// Checks `d/dx_i Σ R ⊙ build(x)` for every input `x_i` registered as a
/// parameter. `R` is a fixed random projection so every output element
/// contributes with a different weight.
fn check_op(name: &str, inputs: &[Tensor<f64>], build: &dyn Fn(&mut Tape<f64>, &[Var]) -> Var) {
    let mut rng = Rng::derive(0x9c, &[mednca::rng::hash_str(name)]);
    let scalar_loss = |tape: &mut Tape<f64>, vars: &[Var], proj: &Option<Tensor<f64>>| -> (Var, Tensor<f64>) {
        let out = build(tape, vars);
        let shape = tape.shape(out);
        let r = proj.clone().unwrap_or_else(|| Tensor::zeros(shape));
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv).unwrap();
        (tape.sum(prod, Axes::ALL).unwrap(), r)
    };
    // Draw the projection once from the output shape.
    let proj = {
        let mut tape = Tape::<f64>::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let shape = tape.shape(out);
        Some(common::random_tensor(&mut rng, shape, -1.0, 1.0))
    };
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| tape.param(ParamId(i), t.clone()))
        .collect();
    let (loss, _) = scalar_loss(&mut tape, &vars, &proj);
    let grads = tape.backward(loss).unwrap();
    let floor = SCALE_FLOOR * global_norm((0..inputs.len()).map(|i| grads.get(ParamId(i)).unwrap().data()));
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads.get(ParamId(i)).unwrap().data().to_vec();
        let mut x = input.data().to_vec();
        let numeric: Vec<f64> = (0..x.len())
            .map(|j| {
                common::central_diff(&mut x, j, H, |xs| {
                    let mut tape = Tape::<f64>::inference();
                    let vars: Vec<Var> = inputs
                        .iter()
                        .enumerate()
                        .map(|(k, t)| {
                            if k == i {
                                tape.constant(Tensor::from_vec(t.shape(), xs.to_vec()).unwrap())
                            } else {
                                tape.constant(t.clone())
                            }
                        })
                        .collect();
                    let (l, _) = scalar_loss(&mut tape, &vars, &proj);
                    tape.value(l).data()[0]
                })
            })
            .collect();
        let err = common::rel_error(&analytic, &numeric, floor);
        assert!(err <= OP_TOL, "{name}: input {i} relative error {err:e}");
    }
}

fn rt(rng: &mut Rng, s: Shape) -> Tensor<f64> {
    common::random_tensor(rng, s, -1.0, 1.0)
}

#[test]
fn conv_and_dense() {
    let mut rng = Rng::new(1);
    let inputs = [rt(&mut rng, Shape::new(2, 2, 4, 5)), rt(&mut rng, Shape::new(3, 2, 3, 3)), rt(&mut rng, Shape::channels(3))];
    check_op("conv", &inputs, &|t, v| t.conv2d_3x3(v[0], v[1], v[2]).unwrap());
    let inputs = [rt(&mut rng, Shape::new(2, 4, 3, 3)), rt(&mut rng, Shape::new(5, 4, 1, 1)), rt(&mut rng, Shape::channels(5))];
    check_op("dense", &inputs, &|t, v| t.dense_1x1(v[0], v[1], Some(v[2])).unwrap());
    check_op("dense_nobias", &inputs[..2], &|t, v| t.dense_1x1(v[0], v[1], None).unwrap());
}

#[test]
fn batch_norm_all_modes() {
    let mut rng = Rng::new(2);
    let inputs = [rt(&mut rng, Shape::new(2, 3, 3, 4)), rt(&mut rng, Shape::channels(3)), rt(&mut rng, Shape::channels(3))];
    check_op("bn_train", &inputs, &|t, v| {
        let mut running = BnStats::new(3);
        let mode = BnMode::Train { running: &mut running, momentum: 0.1 };
        t.batch_norm(v[0], v[1], v[2], mode, 1e-5).unwrap()
    });
    check_op("bn_batch", &inputs, &|t, v| t.batch_norm(v[0], v[1], v[2], BnMode::Batch, 1e-5).unwrap());
    let running = BnStats {
        mean: vec![0.1, -0.2, 0.3],
        var: vec![0.5, 1.5, 2.0],
    };
    check_op("bn_eval", &inputs, &|t, v| {
        t.batch_norm(v[0], v[1], v[2], BnMode::Eval { running: &running }, 1e-5).unwrap()
    });
}

#[test]
fn elementwise_and_broadcast() {
    let mut rng = Rng::new(3);
    let s = Shape::new(2, 3, 2, 3);
    let ab = [rt(&mut rng, s), rt(&mut rng, s)];
    check_op("add", &ab, &|t, v| t.add(v[0], v[1]).unwrap());
    check_op("sub", &ab, &|t, v| t.sub(v[0], v[1]).unwrap());
    check_op("mul", &ab, &|t, v| t.mul(v[0], v[1]).unwrap());
    let chan = [rt(&mut rng, s), rt(&mut rng, Shape::channels(3))];
    check_op("add_channel", &chan, &|t, v| t.add(v[0], v[1]).unwrap());
    check_op("mul_channel", &chan, &|t, v| t.mul(v[0], v[1]).unwrap());
    let sc = [rt(&mut rng, s), rt(&mut rng, Shape::scalar())];
    check_op("mul_scalar", &sc, &|t, v| t.mul(v[0], v[1]).unwrap());
    let x = [rt(&mut rng, s)];
    check_op("relu", &x, &|t, v| t.relu(v[0]).unwrap());
    check_op("sigmoid", &x, &|t, v| t.sigmoid(v[0]).unwrap());
    check_op("abs", &x, &|t, v| t.abs(v[0]).unwrap());
    check_op("scalar_mul", &x, &|t, v| t.scalar_mul(v[0], -2.5).unwrap());
    check_op("scalar_add", &x, &|t, v| t.scalar_add(v[0], 0.75).unwrap());
}

#[test]
fn reductions_and_layout() {
    let mut rng = Rng::new(4);
    let x = [rt(&mut rng, Shape::new(2, 4, 4, 4))];
    check_op("sum_all", &x, &|t, v| t.sum(v[0], Axes::ALL).unwrap());
    check_op("mean_all", &x, &|t, v| t.mean(v[0], Axes::ALL).unwrap());
    check_op("bilinear_down", &x, &|t, v| t.resample(v[0], 2, 2, ResizeMode::Bilinear).unwrap());
    check_op("bilinear_up", &x, &|t, v| t.resample(v[0], 8, 7, ResizeMode::Bilinear).unwrap());
    check_op("narrow", &x, &|t, v| t.narrow_channels(v[0], 1, 2).unwrap());
    check_op("crop", &x, &|t, v| t.crop(v[0], 1, 2, 3, 2).unwrap());
    let pinned = rt(&mut rng, Shape::new(2, 1, 4, 4));
    check_op("pin", &x, &move |t, v| t.pin_channels(v[0], &pinned).unwrap());
    let mask = common::random_tensor(&mut rng, Shape::new(2, 1, 4, 4), 0.0, 1.0).threshold(0.5);
    check_op("mask", &x, &move |t, v| t.mask_pixels(v[0], &mask).unwrap());
    let two = [rt(&mut rng, Shape::new(2, 2, 4, 4)), rt(&mut rng, Shape::new(2, 3, 4, 4))];
    check_op("concat", &two, &|t, v| t.concat_channels(&[v[0], v[1], v[0]]).unwrap());
}

#[test]
fn sum_and_mean_over_axes() {
    let mut rng = Rng::new(5);
    let x = [rt(&mut rng, Shape::new(2, 3, 3, 2))];
    let ax = |n, c, h, w| Axes { n, c, h, w };
    let cases = [
        ("n", ax(true, false, false, false)),
        ("c", ax(false, true, false, false)),
        ("hw", ax(false, false, true, true)),
        ("nhw", Axes::SPATIAL_BATCH),
    ];
    for (name, axes) in cases {
        check_op(&format!("sum_{name}"), &x, &move |t, v| t.sum(v[0], axes).unwrap());
        check_op(&format!("mean_{name}"), &x, &move |t, v| t.mean(v[0], axes).unwrap());
    }
}

#[test]
fn dice_and_focal() {
    let mut rng = Rng::new(6);
    let s = Shape::new(2, 1, 4, 4);
    let p = [common::random_tensor(&mut rng, s, 0.05, 0.95)];
    let target = common::random_tensor(&mut rng, s, 0.0, 1.0).threshold(0.5);
    let w = common::random_tensor(&mut rng, s, 0.0, 1.0);
    let (t1, w1) = (target.clone(), w.clone());
    check_op("dice_w", &p, &move |t, v| t.soft_dice(v[0], &t1, Some(&w1), 1e-6).unwrap());
    let t2 = target.clone();
    check_op("dice", &p, &move |t, v| t.soft_dice(v[0], &t2, None, 1e-6).unwrap());
    let (t3, w3) = (target.clone(), w.clone());
    check_op("focal_w", &p, &move |t, v| t.focal(v[0], &t3, Some(&w3), 1.0, 2.0).unwrap());
    check_op("focal_g0", &p, &move |t, v| t.focal(v[0], &target, None, 0.7, 0.0).unwrap());
}

#[test]
fn fused_nca_step_every_input() {
    let mut rng = Rng::new(7);
    let (c, hd) = (4, 6);
    let inputs = [
        rt(&mut rng, Shape::new(2, c, 4, 5)),
        rt(&mut rng, Shape::new(c, c, 3, 3)),
        rt(&mut rng, Shape::channels(c)),
        rt(&mut rng, Shape::new(c, c, 3, 3)),
        rt(&mut rng, Shape::channels(c)),
        rt(&mut rng, Shape::new(hd, 3 * c, 1, 1)),
        rt(&mut rng, Shape::channels(hd)),
        common::random_tensor(&mut rng, Shape::channels(hd), 0.5, 1.5),
        rt(&mut rng, Shape::channels(hd)),
        rt(&mut rng, Shape::new(c, hd, 1, 1)),
    ];
    let mask = common::random_tensor(&mut rng, Shape::new(2, 1, 4, 5), 0.0, 1.0).threshold(0.5);
    let pinned = rt(&mut rng, Shape::new(2, 1, 4, 5));
    check_op("nca_step", &inputs, &move |t, v| {
        let vars = NcaStepVars {
            perceive1_w: v[1],
            perceive1_b: v[2],
            perceive2_w: v[3],
            perceive2_b: v[4],
            fc0_w: v[5],
            fc0_b: v[6],
            bn_gamma: v[7],
            bn_beta: v[8],
            fc1_w: v[9],
        };
        let mut running = BnStats::new(hd);
        let mode = BnMode::Train { running: &mut running, momentum: 0.1 };
        t.nca_step(v[0], &vars, mode, 1e-5, Some(&mask), &pinned).unwrap()
    });
}

/// Full two-level model + VWSL on a 16×16 input; every parameter group is
/// checked on a random sample of its coordinates.
#[test]
fn full_model_vwsl_gradients() {
    for (group, err) in checks::model_vwsl_errors(12) {
        assert!(err <= 1e-5, "{group}: relative error {err:e}");
    }
}

/// Training path: Train-mode BN, patch forward, supervised loss.
#[test]
fn full_model_supervised_patch_gradients() {
    let model = test_model(31);
    let mut rng = Rng::new(32);
    let image = common::random_tensor(&mut rng, Shape::new(2, 1, 16, 16), 0.0, 1.0);
    let mask = common::random_tensor(&mut rng, Shape::new(2, 1, 16, 16), 0.0, 1.0).threshold(0.5);
    let cfg = LossConfig::default();
    let loss_of = |m: &MedNcaModel<f64>, tape: &mut Tape<f64>| {
        let vars = m.register(tape);
        let out = m
            .forward_training_patch(tape, &vars, &image, &mask, &mut Rng::new(33), 8, Mode::Train)
            .unwrap();
        let p1 = tape.sigmoid(out.logits_l1).unwrap();
        let p2 = tape.sigmoid(out.logits_l2).unwrap();
        mednca::losses::supervised_loss(tape, [p1, p2], [&out.target_l1, &out.target_l2], &cfg).unwrap()
    };
    let mut tape = Tape::<f64>::new();
    let loss = loss_of(&model, &mut tape);
    let grads = tape.backward(loss).unwrap();
    let ids: Vec<_> = (0..2).flat_map(|l| (0..PARAMS_PER_CELL).map(move |s| param_id(l, s))).collect();
    let floor = SCALE_FLOOR * global_norm(ids.iter().map(|&id| grads.get(id).unwrap().data()));
    for (k, &id) in ids.iter().enumerate() {
        let g = grads.get(id).unwrap();
        let picks: Vec<usize> = (0..6).map(|_| rng.below(g.numel() as u64) as usize).collect();
        let analytic: Vec<f64> = picks.iter().map(|&i| g.data()[i]).collect();
        let numeric: Vec<f64> = picks
            .iter()
            .map(|&i| {
                let eval = |d: f64| {
                    let mut m = model.clone();
                    m.trainable_mut()[k].data_mut()[i] += d;
                    let mut tape = Tape::<f64>::inference();
                    let l = loss_of(&m, &mut tape);
                    tape.value(l).data()[0]
                };
                (eval(H) - eval(-H)) / (2.0 * H)
            })
            .collect();
        let err = common::rel_error(&analytic, &numeric, floor);
        assert!(err <= 1e-5, "group {k}: relative error {err:e}");
    }
}
