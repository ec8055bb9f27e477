//! Adam with bias correction.

use crate::error::{Error, Result};
use crate::tensor::{Gradients, ParamId, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-8,
        }
    }
}

/// First/second moment buffers for one flat parameter vector.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One Adam update of `params` in place. Moments are kept in `f64`
/// regardless of `T` so the update is independent of parameter precision.
pub fn adam_step<T: Scalar>(params: &mut [T], grads: &[T], state: &mut AdamState, lr: f64, hyper: AdamHyper) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), state.m.len());
    state.t += 1;
    let AdamHyper { beta1, beta2, eps } = hyper;
    let c1 = 1.0 - beta1.powf(state.t as f64);
    let c2 = 1.0 - beta2.powf(state.t as f64);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g.to_f64_lossy();
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let step = lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        *p = T::from_f64_lossy(p.to_f64_lossy() - step);
    }
}

/// Adam over a fixed, ordered list of parameter tensors addressed by
/// `ParamId(i)`.
#[derive(Clone, Debug)]
pub struct Adam {
    pub hyper: AdamHyper,
    states: Vec<AdamState>,
}

impl Adam {
    pub fn new<T: Scalar>(params: &[&Tensor<T>], hyper: AdamHyper) -> Self {
        Adam {
            hyper,
            states: params.iter().map(|t| AdamState::new(t.numel())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.states.first().map_or(0, |s| s.t)
    }

    pub fn step<T: Scalar>(&mut self, params: Vec<&mut Tensor<T>>, grads: &Gradients<T>, lr: f64) -> Result<()> {
        if params.len() != self.states.len() {
            return Err(Error::invalid(format!(
                "optimizer built for {} tensors, got {}",
                self.states.len(),
                params.len()
            )));
        }
        for (i, (p, state)) in params.into_iter().zip(&mut self.states).enumerate() {
            let g = grads
                .get(ParamId(i))
                .ok_or_else(|| Error::invalid(format!("no gradient for parameter {i}")))?;
            if g.shape() != p.shape() {
                return Err(Error::invalid(format!("gradient {i} has shape {:?}, parameter {:?}", g.shape(), p.shape())));
            }
            adam_step(p.data_mut(), g.data(), state, lr, self.hyper);
        }
        Ok(())
    }
}
