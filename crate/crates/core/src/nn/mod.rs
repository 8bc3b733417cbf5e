//! Small dense neural-network engine: an LSTM stack, an MLP, Adam and a
//! triangular learning-rate schedule. Everything is f64.
//!
//! Batches are column-major: a matrix of shape `features × batch`. A sequence
//! of `T` steps is stored time-major in one `features × (T·batch)` matrix, so
//! step `t` occupies columns `t·batch .. (t+1)·batch`.

mod adam;
mod checkpoint;
mod lstm;
mod mlp;

pub use adam::{adam_step, AdamState, TriangularLrSchedule};
pub use checkpoint::{config_hash, Checkpoint, TensorRecord, CHECKPOINT_VERSION};
pub use lstm::{LstmCache, LstmLayer, LstmStack, LstmState};
pub use mlp::{Mlp, MlpCache};

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use std::ops::AddAssign;

pub type Mat = DMatrix<f64>;

/// A model whose trainable tensors can be enumerated in a fixed order.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Mat>;
    fn tensors_mut(&mut self) -> Vec<&mut Mat>;
    /// Stable names, aligned with [`Parameters::tensors`].
    fn tensor_names(&self) -> Vec<String>;

    /// Same architecture, every tensor zero. Used as a gradient accumulator.
    fn zeros_like(&self) -> Self
    where
        Self: Sized + Clone,
    {
        let mut z = self.clone();
        for t in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn flat(&self) -> Vec<f64> {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter().copied())
            .collect()
    }
}

/// Adds `other` into `acc`, tensor by tensor.
pub fn accumulate<P: Parameters>(acc: &mut P, other: &P) {
    for (a, b) in acc.tensors_mut().into_iter().zip(other.tensors()) {
        *a += b;
    }
}

pub fn scale_grads<P: Parameters>(g: &mut P, factor: f64) {
    for t in g.tensors_mut() {
        *t *= factor;
    }
}

pub(crate) fn uniform_init<R: Rng>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Mat {
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    // Row-major fill so the draw order does not depend on storage layout.
    let mut m = Mat::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            m[(r, c)] = dist.sample(rng);
        }
    }
    m
}

/// `y = W x + b` with `b` broadcast over columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Mat,
    pub b: Mat,
}

impl Dense {
    pub fn new<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        Self {
            w: uniform_init(output, input, bound, rng),
            b: uniform_init(output, 1, bound, rng),
        }
    }

    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: Mat::zeros(output, input),
            b: Mat::zeros(output, 1),
        }
    }

    pub fn input_size(&self) -> usize {
        self.w.ncols()
    }

    pub fn output_size(&self) -> usize {
        self.w.nrows()
    }

    pub fn forward(&self, x: &Mat) -> Mat {
        let mut y = &self.w * x;
        for mut col in y.column_iter_mut() {
            col += self.b.column(0);
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(&self, x: &Mat, dy: &Mat, grad: &mut Dense) -> Mat {
        grad.w.gemm(1.0, dy, &x.transpose(), 1.0);
        for col in dy.column_iter() {
            grad.b.column_mut(0).add_assign(&col);
        }
        self.w.transpose() * dy
    }
}

impl Parameters for Dense {
    fn tensors(&self) -> Vec<&Mat> {
        vec![&self.w, &self.b]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        vec![&mut self.w, &mut self.b]
    }

    fn tensor_names(&self) -> Vec<String> {
        vec!["w".into(), "b".into()]
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
