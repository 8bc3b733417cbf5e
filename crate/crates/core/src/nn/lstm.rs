use super::{sigmoid, uniform_init, Dense, Mat, Parameters};
use crate::error::{Error, Result};
use rand::Rng;
use std::ops::AddAssign;

/// One LSTM layer. Gate rows are stacked in the order input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub w_x: Mat,
    pub w_h: Mat,
    pub b: Mat,
}

impl LstmLayer {
    fn new<R: Rng>(input: usize, hidden: usize, rng: &mut R) -> Self {
        let w_x = uniform_init(4 * hidden, input, 1.0 / (input as f64).sqrt(), rng);
        let w_h = uniform_init(4 * hidden, hidden, 1.0 / (hidden as f64).sqrt(), rng);
        let mut b = Mat::zeros(4 * hidden, 1);
        b.rows_mut(hidden, hidden).fill(1.0);
        Self { w_x, w_h, b }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.ncols()
    }

    pub fn input_size(&self) -> usize {
        self.w_x.ncols()
    }
}

/// Hidden and cell state of every layer, each `hidden × batch`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: Vec<Mat>,
    pub c: Vec<Mat>,
}

impl LstmState {
    pub fn zeros(net: &LstmStack, batch: usize) -> Self {
        let h: Vec<Mat> = net
            .layers
            .iter()
            .map(|l| Mat::zeros(l.hidden(), batch))
            .collect();
        Self { c: h.clone(), h }
    }

    pub fn batch(&self) -> usize {
        self.h.first().map_or(0, |m| m.ncols())
    }
}

/// Stacked LSTM layers followed by a dense head applied at every step.
#[derive(Debug, Clone)]
pub struct LstmStack {
    pub layers: Vec<LstmLayer>,
    pub head: Dense,
    generation: u64,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: Mat,
    /// Post-activation gates, `4h × T·B`.
    gates: Mat,
    c: Mat,
    tanh_c: Mat,
    h: Mat,
    h0: Mat,
    c0: Mat,
}

/// Activations from [`LstmStack::forward`], enough for an exact backward pass.
#[derive(Debug, Clone)]
pub struct LstmCache {
    layers: Vec<LayerCache>,
    batch: usize,
    steps: usize,
    generation: u64,
}

impl LstmCache {
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    /// State after the last step, for continuing a sequence.
    pub fn final_state(&self) -> LstmState {
        let b = self.batch;
        let start = (self.steps - 1) * b;
        LstmState {
            h: self
                .layers
                .iter()
                .map(|l| l.h.columns(start, b).into_owned())
                .collect(),
            c: self
                .layers
                .iter()
                .map(|l| l.c.columns(start, b).into_owned())
                .collect(),
        }
    }
}

impl LstmStack {
    pub fn new<R: Rng>(
        input: usize,
        hidden: usize,
        n_layers: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        let mut layers = Vec::with_capacity(n_layers);
        for k in 0..n_layers {
            let width = if k == 0 { input } else { hidden };
            layers.push(LstmLayer::new(width, hidden, rng));
        }
        let head = Dense::new(hidden, output, rng);
        Self {
            layers,
            head,
            generation: 0,
        }
    }

    pub fn input_size(&self) -> usize {
        self.layers[0].input_size()
    }

    pub fn hidden(&self) -> usize {
        self.layers[0].hidden()
    }

    pub fn output_size(&self) -> usize {
        self.head.output_size()
    }

    /// Runs a time-major sequence `input × (T·batch)`, starting from `init`
    /// or from zeros. Returns outputs `output × (T·batch)`.
    pub fn forward(
        &self,
        x: &Mat,
        batch: usize,
        init: Option<&LstmState>,
    ) -> Result<(Mat, LstmCache)> {
        if x.nrows() != self.input_size() {
            return Err(Error::Shape(format!(
                "lstm input has {} rows, expected {}",
                x.nrows(),
                self.input_size()
            )));
        }
        if batch == 0 || x.ncols() == 0 || !x.ncols().is_multiple_of(batch) {
            return Err(Error::Shape(format!(
                "lstm input has {} columns, not a positive multiple of batch {batch}",
                x.ncols()
            )));
        }
        if let Some(s) = init {
            if s.h.len() != self.layers.len() || s.batch() != batch {
                return Err(Error::Shape("initial lstm state does not match".into()));
            }
        }
        let steps = x.ncols() / batch;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut input = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let hd = layer.hidden();
            let (h0, c0) = match init {
                Some(s) => (s.h[k].clone(), s.c[k].clone()),
                None => (Mat::zeros(hd, batch), Mat::zeros(hd, batch)),
            };
            let mut pre_x = &layer.w_x * &input;
            for mut col in pre_x.column_iter_mut() {
                col += layer.b.column(0);
            }
            let mut gates = Mat::zeros(4 * hd, steps * batch);
            let mut c = Mat::zeros(hd, steps * batch);
            let mut tanh_c = Mat::zeros(hd, steps * batch);
            let mut h = Mat::zeros(hd, steps * batch);
            let mut h_prev = h0.clone();
            let mut c_prev = c0.clone();
            for t in 0..steps {
                let cols = t * batch;
                let mut pre = pre_x.columns(cols, batch).into_owned();
                pre.gemm(1.0, &layer.w_h, &h_prev, 1.0);
                for j in 0..batch {
                    for r in 0..hd {
                        let i_g = sigmoid(pre[(r, j)]);
                        let f_g = sigmoid(pre[(hd + r, j)]);
                        let g_g = pre[(2 * hd + r, j)].tanh();
                        let o_g = sigmoid(pre[(3 * hd + r, j)]);
                        let ct = f_g * c_prev[(r, j)] + i_g * g_g;
                        let tc = ct.tanh();
                        let col = cols + j;
                        gates[(r, col)] = i_g;
                        gates[(hd + r, col)] = f_g;
                        gates[(2 * hd + r, col)] = g_g;
                        gates[(3 * hd + r, col)] = o_g;
                        c[(r, col)] = ct;
                        tanh_c[(r, col)] = tc;
                        h[(r, col)] = o_g * tc;
                    }
                }
                h_prev = h.columns(cols, batch).into_owned();
                c_prev = c.columns(cols, batch).into_owned();
            }
            let next = h.clone();
            caches.push(LayerCache {
                input,
                gates,
                c,
                tanh_c,
                h,
                h0,
                c0,
            });
            input = next;
        }
        let y = self.head.forward(&input);
        Ok((
            y,
            LstmCache {
                layers: caches,
                batch,
                steps,
                generation: self.generation,
            },
        ))
    }

    /// Backpropagation through time. `dy` is `∂L/∂outputs`, same shape as the
    /// forward output. Returns parameter gradients and `∂L/∂input`.
    pub fn backward(&self, cache: &LstmCache, dy: &Mat) -> Result<(LstmStack, Mat)> {
        if cache.generation != self.generation || cache.layers.len() != self.layers.len() {
            return Err(Error::StaleCache("parameters changed since the forward pass".into()));
        }
        let b = cache.batch;
        let steps = cache.steps;
        if dy.nrows() != self.output_size() || dy.ncols() != steps * b {
            return Err(Error::Shape(format!(
                "output gradient is {}x{}, expected {}x{}",
                dy.nrows(),
                dy.ncols(),
                self.output_size(),
                steps * b
            )));
        }
        let mut grad = self.zeros_like();
        let top = &cache.layers[cache.layers.len() - 1];
        let mut d_h_above = self.head.backward(&top.h, dy, &mut grad.head);

        for k in (0..self.layers.len()).rev() {
            let layer = &self.layers[k];
            let lc = &cache.layers[k];
            let hd = layer.hidden();
            let mut d_gates = Mat::zeros(4 * hd, steps * b);
            let mut dh_next = Mat::zeros(hd, b);
            let mut dc_next = Mat::zeros(hd, b);
            for t in (0..steps).rev() {
                let cols = t * b;
                for j in 0..b {
                    let col = cols + j;
                    for r in 0..hd {
                        let i_g = lc.gates[(r, col)];
                        let f_g = lc.gates[(hd + r, col)];
                        let g_g = lc.gates[(2 * hd + r, col)];
                        let o_g = lc.gates[(3 * hd + r, col)];
                        let tc = lc.tanh_c[(r, col)];
                        let c_prev = if t == 0 {
                            lc.c0[(r, j)]
                        } else {
                            lc.c[(r, col - b)]
                        };
                        let dh = d_h_above[(r, col)] + dh_next[(r, j)];
                        let dc = dh * o_g * (1.0 - tc * tc) + dc_next[(r, j)];
                        d_gates[(r, col)] = dc * g_g * i_g * (1.0 - i_g);
                        d_gates[(hd + r, col)] = dc * c_prev * f_g * (1.0 - f_g);
                        d_gates[(2 * hd + r, col)] = dc * i_g * (1.0 - g_g * g_g);
                        d_gates[(3 * hd + r, col)] = dh * tc * o_g * (1.0 - o_g);
                        dc_next[(r, j)] = dc * f_g;
                    }
                }
                let dg_t = d_gates.columns(cols, b);
                dh_next = layer.w_h.transpose() * dg_t;
            }
            // Hidden state entering each step, to batch the recurrent weight gradient.
            let mut h_prev = Mat::zeros(hd, steps * b);
            h_prev.columns_mut(0, b).copy_from(&lc.h0);
            if steps > 1 {
                h_prev
                    .columns_mut(b, (steps - 1) * b)
                    .copy_from(&lc.h.columns(0, (steps - 1) * b));
            }
            let g = &mut grad.layers[k];
            g.w_x.gemm(1.0, &d_gates, &lc.input.transpose(), 1.0);
            g.w_h.gemm(1.0, &d_gates, &h_prev.transpose(), 1.0);
            for col in d_gates.column_iter() {
                g.b.column_mut(0).add_assign(&col);
            }
            d_h_above = layer.w_x.transpose() * &d_gates;
        }
        Ok((grad, d_h_above))
    }

    /// Forward pass without keeping the cache.
    pub fn predict(&self, x: &Mat, batch: usize, init: Option<&LstmState>) -> Result<Mat> {
        self.forward(x, batch, init).map(|(y, _)| y)
    }
}

impl Parameters for LstmStack {
    fn tensors(&self) -> Vec<&Mat> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.extend([&l.w_x, &l.w_h, &l.b]);
        }
        v.extend([&self.head.w, &self.head.b]);
        v
    }

    fn tensors_mut(&mut self) -> Vec<&mut Mat> {
        self.generation += 1;
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.extend([&mut l.w_x, &mut l.w_h, &mut l.b]);
        }
        v.extend([&mut self.head.w, &mut self.head.b]);
        v
    }

    fn tensor_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for k in 0..self.layers.len() {
            v.push(format!("lstm{k}.w_x"));
            v.push(format!("lstm{k}.w_h"));
            v.push(format!("lstm{k}.b"));
        }
        v.push("head.w".into());
        v.push("head.b".into());
        v
    }
}
