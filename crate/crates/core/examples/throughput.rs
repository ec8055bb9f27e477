//! Forward/backward timing of one training batch and of single-image
//! inference. `cargo run --release --example throughput -- [batch] [patch]`

use std::time::Instant;

use mednca::nca::{MedNcaConfig, MedNcaModel, Mode, INFERENCE_MODE};
use mednca::rng::Rng;
use mednca::tensor::{Axes, Shape, Tape, Tensor};

fn main() {
    let mut args = std::env::args().skip(1).map(|s| s.parse::<usize>().expect("numeric argument"));
    let batch = args.next().unwrap_or(8);
    let patch = args.next().unwrap_or(64);

    let mut rng = Rng::new(1);
    let mut model = MedNcaModel::<f32>::initialize(MedNcaConfig::default(), &mut rng).unwrap();
    // A zero output layer would make every step a no-op.
    for cell in [&mut model.level1, &mut model.level2] {
        cell.fc1_w.data_mut().fill(0.01);
    }
    let img = Tensor::<f32>::from_fn(Shape::new(batch, 1, 64, 64), |_, _, y, x| ((x + y) % 7) as f32 / 7.0);
    let mask = img.threshold(0.5);
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let vars = model.register(&mut tape);
        let out = model
            .forward_training_patch(&mut tape, &vars, &img, &mask, &mut rng, patch, Mode::Train)
            .unwrap();
        let p = tape.sigmoid(out.logits_l2).unwrap();
        let loss = tape.sum(p, Axes::ALL).unwrap();
        let t1 = Instant::now();
        tape.backward(loss).unwrap();
        println!("train batch {batch} patch {patch}: forward {:?} backward {:?}", t1 - t0, t1.elapsed());
    }
    let one = img.batch_item(0);
    let t0 = Instant::now();
    for _ in 0..5 {
        model.forward(&mut Tape::inference(), &one, &mut rng, INFERENCE_MODE).unwrap();
    }
    println!("inference 64x64: {:?} per image", t0.elapsed() / 5);
}
