//! Gradient-free prediction.
//!
//! Batch items are run one at a time: BN normalizes by the statistics of
//! the current input, so a prediction never depends on what it was
//! batched with.

use crate::error::Result;
use crate::nca::{MedNcaModel, INFERENCE_MODE};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

/// Sigmoid of the level-2 logits for `image: [n, 1, h, w]`.
pub fn predict_probs(model: &MedNcaModel<f32>, image: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>> {
    Ok(predict_levels(model, image, rng)?.1)
}

/// Both levels' probabilities: `(level1, level2)`.
pub fn predict_levels(model: &MedNcaModel<f32>, image: &Tensor<f32>, rng: &mut Rng) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let mut l1 = Vec::with_capacity(image.shape().n);
    let mut l2 = Vec::with_capacity(image.shape().n);
    for i in 0..image.shape().n {
        let mut tape = Tape::inference();
        let out = model.forward(&mut tape, &image.batch_item(i), rng, INFERENCE_MODE)?;
        let p1 = tape.sigmoid(out.logits_l1)?;
        let p2 = tape.sigmoid(out.logits_l2)?;
        l1.push(tape.value(p1).clone());
        l2.push(tape.value(p2).clone());
    }
    Ok((Tensor::stack(&l1.iter().collect::<Vec<_>>())?, Tensor::stack(&l2.iter().collect::<Vec<_>>())?))
}
