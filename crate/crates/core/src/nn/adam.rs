use super::{Mat, Parameters};
use serde::{Deserialize, Serialize};

/// Moment accumulators for Adam, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<P: Parameters>(params: &P) -> Self {
        let m: Vec<Mat> = params
            .tensors()
            .iter()
            .map(|t| Mat::zeros(t.nrows(), t.ncols()))
            .collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<P: Parameters>(params: &mut P, grads: &P, state: &mut AdamState, lr: f64) {
    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let grads = grads.tensors();
    for (k, p) in params.tensors_mut().into_iter().enumerate() {
        let g = grads[k];
        let m = &mut state.m[k];
        let v = &mut state.v[k];
        assert_eq!(p.shape(), g.shape(), "gradient shape mismatch");
        for idx in 0..p.len() {
            let gi = g[idx];
            m[idx] = b1 * m[idx] + (1.0 - b1) * gi;
            v[idx] = b2 * v[idx] + (1.0 - b2) * gi * gi;
            let m_hat = m[idx] / c1;
            let v_hat = v[idx] / c2;
            p[idx] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Learning rate rising linearly from `lr_min` to `lr_max` over half a cycle
/// and falling back over the other half.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriangularLrSchedule {
    pub lr_min: f64,
    pub lr_max: f64,
    pub cycle_length: u64,
}

impl Default for TriangularLrSchedule {
    fn default() -> Self {
        Self {
            lr_min: 1e-7,
            lr_max: 1e-4,
            cycle_length: 100,
        }
    }
}

impl TriangularLrSchedule {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        let cycle = self.cycle_length.max(1);
        let pos = (iteration % cycle) as f64 / cycle as f64;
        let tri = 1.0 - (2.0 * pos - 1.0).abs();
        self.lr_min + (self.lr_max - self.lr_min) * tri
    }
}
