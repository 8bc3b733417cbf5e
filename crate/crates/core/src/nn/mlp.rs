use super::{Dense, Mat, Parameters};
use crate::error::{Error, Result};
use rand::Rng;

/// Fully connected network, ReLU on hidden layers and a linear output.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    generation: u64,
}

/// Inputs of each layer plus hidden pre-activations.
#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Mat>,
    pre: Vec<Mat>,
    generation: u64,
}

impl Mlp {
    /// `widths` lists every layer size, input first and output last.
    pub fn new<R: Rng>(widths: &[usize], rng: &mut R) -> Self {
        assert!(widths.len() >= 2, "an mlp needs an input and an output width");
        let layers = widths
            .windows(2)
            .map(|w| Dense::new(w[0], w[1], rng))
            .collect();
        Self {
            layers,
            generation: 0,
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn output_size(&self) -> usize {
        self.layers[self.layers.len() - 1].output_size()
    }

    pub fn forward(&self, x: &Mat) -> Result<(Mat, MlpCache)> {
        if x.nrows() != self.input_size() {
            return Err(Error::Shape(format!(
                "mlp input has {} rows, expected {}",
                x.nrows(),
                self.input_size()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut a = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(&a);
            inputs.push(a);
            if k == last {
                a = z;
            } else {
                a = z.map(|v| v.max(0.0));
                pre.push(z);
            }
        }
        Ok((
            a,
            MlpCache {
                inputs,
                pre,
                generation: self.generation,
            },
        ))
    }

    pub fn predict(&self, x: &Mat) -> Result<Mat> {
        self.forward(x).map(|(y, _)| y)
    }

    /// Returns parameter gradients and `∂L/∂x` for output gradient `dy`.
    pub fn backward(&self, cache: &MlpCache, dy: &Mat) -> Result<(Mlp, Mat)> {
        if cache.generation != self.generation || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache("parameters changed since the forward pass".into()));
        }
        if dy.nrows() != self.output_size() || dy.ncols() != cache.inputs[0].ncols() {
            return Err(Error::Shape("mlp output gradient shape mismatch".into()));
        }
        let mut grad = self.zeros_like();
        let mut d = dy.clone();
        for k in (0..self.layers.len()).rev() {
            if k < self.layers.len() - 1 {
                d.zip_apply(&cache.pre[k], |g, z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
            }
            d = self.layers[k].backward(&cache.inputs[k], &d, &mut grad.layers[k]);
        }
        Ok((grad, d))
    }
}

impl Parameters for Mlp {
    fn tensors(&self) -> Vec<&Mat> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    fn tensor_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|k| [format!("dense{k}.w"), format!("dense{k}.b")])
            .collect()
    }
}
