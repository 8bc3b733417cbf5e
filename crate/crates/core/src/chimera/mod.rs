//! Physics-informed recurrent state estimator and its two comparison models.
//!
//! Three variants share one output convention: the network emits angles and
//! magnitudes of the non-reference buses, mapped as `θ = s_θ·y` and
//! `V = 1 + s_V·y`, with the reference bus fixed at angle 0 and magnitude 1.

mod losses;
mod train;

pub use losses::{
    dynamic_loss, dynamic_loss_grad, static_loss, static_loss_grad, LossTerms,
};
pub use train::{loss_and_gradient, train, TrainLog, TrainLogEntry, TrainSet, ValidationEntry};

use crate::dataset::EpochRecord;
use crate::error::{Error, Result};
use crate::grid_model::{GridCase, MatrixBundle};
use crate::nn::{Checkpoint, LstmStack, LstmState, Mat, Mlp, Parameters, TriangularLrSchedule};
use crate::powerflow::StateVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelVariant {
    #[serde(rename = "chimera")]
    Chimera,
    #[serde(rename = "lstm_ref")]
    LstmRef,
    #[serde(rename = "mlp")]
    MlpBaseline,
}

impl ModelVariant {
    pub const ALL: [ModelVariant; 3] = [Self::Chimera, Self::LstmRef, Self::MlpBaseline];

    pub fn name(self) -> &'static str {
        match self {
            Self::Chimera => "chimera",
            Self::LstmRef => "lstm_ref",
            Self::MlpBaseline => "mlp",
        }
    }

    pub fn is_recurrent(self) -> bool {
        !matches!(self, Self::MlpBaseline)
    }

    /// Only the MLP baseline is trained against true states.
    pub fn uses_truth(self) -> bool {
        matches!(self, Self::MlpBaseline)
    }

    pub fn input_width(self, n_buses: usize) -> usize {
        match self {
            Self::Chimera => 3 * n_buses,
            _ => 2 * n_buses,
        }
    }
}

impl fmt::Display for ModelVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}, expected one of chimera, lstm_ref, mlp"
                ))
            })
    }
}

/// What the estimator sees at one epoch. Carries no ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub z: Vec<f64>,
    /// DC angle estimate from the active-power part of `z`, all buses.
    pub theta_dc: Vec<f64>,
    /// Whether the previous observation is the immediately preceding epoch.
    pub has_prev: bool,
}

impl Observation {
    pub fn p(&self) -> &[f64] {
        &self.z[..self.theta_dc.len()]
    }

    /// Observations for a run of records, linking consecutive epoch indices.
    pub fn from_records(records: &[EpochRecord]) -> Vec<Observation> {
        records
            .iter()
            .enumerate()
            .map(|(k, r)| Observation {
                z: r.z.clone(),
                theta_dc: r.theta_dc.clone(),
                has_prev: k > 0 && records[k - 1].t + 1 == r.t,
            })
            .collect()
    }
}

/// `[z; θ̃]` for the physics-informed variant, `z` otherwise.
pub fn assemble_input(variant: ModelVariant, obs: &Observation) -> Vec<f64> {
    let mut u = obs.z.clone();
    if variant == ModelVariant::Chimera {
        u.extend_from_slice(&obs.theta_dc);
    }
    u
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: ModelVariant,
    pub gamma: f64,
    pub hidden: usize,
    pub lstm_layers: usize,
    pub mlp_hidden: Vec<usize>,
    pub seq_len: usize,
    pub batch: usize,
    pub coarse_iterations: usize,
    pub coarse_lr: f64,
    pub fine_iterations: usize,
    pub schedule: TriangularLrSchedule,
    /// Validation loss is checked every this many iterations; the best
    /// parameters seen are kept.
    pub validation_interval: usize,
    pub seed: u64,
    pub split_fractions: [f64; 3],
    pub theta_scale: f64,
    pub v_scale: f64,
    /// Standardize inputs with training-split mean and deviation. On by
    /// default for the recurrent variants, off for the MLP; both choices
    /// gave the lower validation error.
    pub standardize: bool,
}

impl TrainConfig {
    pub fn new(variant: ModelVariant, seed: u64) -> Self {
        Self {
            variant,
            gamma: 1e-3,
            hidden: 128,
            lstm_layers: 2,
            mlp_hidden: vec![128, 128, 64],
            seq_len: 32,
            batch: 32,
            coarse_iterations: 150,
            coarse_lr: 1e-3,
            fine_iterations: 500,
            schedule: TriangularLrSchedule::default(),
            validation_interval: 50,
            seed,
            split_fractions: crate::dataset::DEFAULT_FRACTIONS,
            theta_scale: 0.1,
            v_scale: 0.05,
            standardize: variant.is_recurrent(),
        }
    }

    pub fn total_iterations(&self) -> usize {
        self.coarse_iterations + self.fine_iterations
    }

    /// Window length the variant consumes at inference.
    pub fn window(&self) -> usize {
        if self.variant.is_recurrent() {
            self.seq_len
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.seq_len == 0 || self.batch == 0 || self.hidden == 0 || self.lstm_layers == 0 {
            return bad("sequence length, batch, hidden width and layer count must be positive");
        }
        if self.mlp_hidden.contains(&0) {
            return bad("mlp widths must be positive");
        }
        if !(self.coarse_lr > 0.0) || !(self.theta_scale > 0.0) || !(self.v_scale > 0.0) {
            return bad("learning rate and output scales must be positive");
        }
        let s = &self.schedule;
        if !(s.lr_min > 0.0 && s.lr_min <= s.lr_max) || s.cycle_length == 0 {
            return bad("schedule needs 0 < lr_min <= lr_max and a positive cycle");
        }
        Ok(())
    }
}

/// Per-feature affine input map `(u − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    pub fn fit(inputs: &[Vec<f64>]) -> Self {
        let width = inputs[0].len();
        let k = inputs.len() as f64;
        let mut mean = vec![0.0; width];
        for u in inputs {
            for (m, v) in mean.iter_mut().zip(u) {
                *m += v / k;
            }
        }
        let mut std = vec![0.0; width];
        for u in inputs {
            for ((s, v), m) in std.iter_mut().zip(u).zip(&mean) {
                *s += (v - m) * (v - m) / k;
            }
        }
        // Constant features (the reference angle) pass through unscaled.
        let std = std
            .into_iter()
            .map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            .collect();
        Self { mean, std }
    }

    pub fn apply(&self, u: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = (u[k] - self.mean[k]) / self.std[k];
        }
    }
}

#[derive(Debug, Clone)]
pub enum Network {
    Lstm(LstmStack),
    Mlp(Mlp),
}

impl Network {
    fn build(cfg: &TrainConfig, input: usize, output: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        if cfg.variant.is_recurrent() {
            Network::Lstm(LstmStack::new(
                input,
                cfg.hidden,
                cfg.lstm_layers,
                output,
                &mut rng,
            ))
        } else {
            let mut widths = vec![input];
            widths.extend(&cfg.mlp_hidden);
            widths.push(output);
            Network::Mlp(Mlp::new(&widths, &mut rng))
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            Network::Lstm(n) => n.n_params(),
            Network::Mlp(n) => n.n_params(),
        }
    }
}

/// A trained estimator: network, input map, output convention.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub norm: InputNorm,
    pub net: Network,
    pub n_buses: usize,
    pub reference: usize,
    pub non_reference: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    train: TrainConfig,
    norm: InputNorm,
    n_buses: usize,
    reference: usize,
}

impl TrainedModel {
    /// Freshly initialized model for `case`.
    pub fn init(case: &GridCase, config: TrainConfig, norm: InputNorm) -> Result<Self> {
        config.validate()?;
        let n = case.n_buses();
        let input = config.variant.input_width(n);
        if norm.mean.len() != input {
            return Err(Error::Shape(format!(
                "input map has width {}, variant needs {input}",
                norm.mean.len()
            )));
        }
        let net = Network::build(&config, input, 2 * (n - 1));
        Ok(Self {
            config,
            norm,
            net,
            n_buses: n,
            reference: case.reference(),
            non_reference: case.non_reference(),
        })
    }

    pub fn variant(&self) -> ModelVariant {
        self.config.variant
    }

    pub fn output_width(&self) -> usize {
        2 * self.non_reference.len()
    }

    /// Network output column to full state.
    pub fn decode(&self, y: &[f64]) -> StateVector {
        let nr = self.non_reference.len();
        let mut x = StateVector::flat(self.n_buses);
        for (k, &i) in self.non_reference.iter().enumerate() {
            x.theta[i] = self.config.theta_scale * y[k];
            x.v[i] = 1.0 + self.config.v_scale * y[nr + k];
        }
        x
    }

    /// Chains a gradient over the stacked state `[θ; V]` to the raw output.
    pub fn encode_grad(&self, g_state: &[f64], out: &mut [f64]) {
        let nr = self.non_reference.len();
        let n = self.n_buses;
        for (k, &i) in self.non_reference.iter().enumerate() {
            out[k] = self.config.theta_scale * g_state[i];
            out[nr + k] = self.config.v_scale * g_state[n + i];
        }
    }

    fn input_column(&self, obs: &Observation, out: &mut [f64]) {
        let u = assemble_input(self.variant(), obs);
        self.norm.apply(&u, out);
    }

    /// Time-major input matrix for `windows`, each of equal length.
    pub(crate) fn input_matrix(&self, windows: &[&[Observation]]) -> Mat {
        let width = self.norm.mean.len();
        let b = windows.len();
        let steps = windows[0].len();
        let mut x = Mat::zeros(width, steps * b);
        let mut col = vec![0.0; width];
        for (j, w) in windows.iter().enumerate() {
            for (t, obs) in w.iter().enumerate() {
                self.input_column(obs, &mut col);
                x.column_mut(t * b + j).copy_from_slice(&col);
            }
        }
        x
    }

    /// Estimate from exactly one window (the model's sequence length for the
    /// recurrent variants, one epoch for the MLP). The last epoch is estimated.
    pub fn estimate(&self, window: &[Observation]) -> Result<StateVector> {
        let need = self.config.window();
        if window.len() < need {
            return Err(Error::WarmUp {
                needed: need,
                available: window.len(),
            });
        }
        let window = &window[window.len() - need..];
        let x = self.input_matrix(&[window]);
        let y = match &self.net {
            Network::Lstm(net) => net.predict(&x, 1, None)?,
            Network::Mlp(net) => net.predict(&x)?,
        };
        let last = y.column(y.ncols() - 1);
        Ok(self.decode(last.as_slice()))
    }

    /// Estimates for every index in `range` of `series`. Epochs without a full
    /// window of history are padded by repeating the earliest epoch.
    pub fn estimate_series(
        &self,
        series: &[Observation],
        range: std::ops::Range<usize>,
    ) -> Result<Vec<StateVector>> {
        const CHUNK: usize = 128;
        let idx: Vec<usize> = range.collect();
        let mut out = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(CHUNK) {
            let windows: Vec<Vec<Observation>> =
                chunk.iter().map(|&t| self.padded_window(series, t)).collect();
            let refs: Vec<&[Observation]> = windows.iter().map(|w| w.as_slice()).collect();
            let x = self.input_matrix(&refs);
            let b = chunk.len();
            let y = match &self.net {
                Network::Lstm(net) => net.predict(&x, b, None)?,
                Network::Mlp(net) => net.predict(&x)?,
            };
            let start = y.ncols() - b;
            for j in 0..b {
                out.push(self.decode(y.column(start + j).as_slice()));
            }
        }
        Ok(out)
    }

    /// The `window()` epochs ending at `t`, repeat-padded at the start.
    pub fn padded_window(&self, series: &[Observation], t: usize) -> Vec<Observation> {
        let need = self.config.window();
        (0..need)
            .map(|k| {
                let idx = (t + k + 1).saturating_sub(need);
                series[idx].clone()
            })
            .collect()
    }

    /// Fixes the history before epoch `t` so the estimate at `t` can be
    /// re-evaluated cheaply for modified measurements.
    pub fn probe<'a>(
        &'a self,
        bundle: &'a MatrixBundle,
        series: &[Observation],
        t: usize,
    ) -> Result<EpochProbe<'a>> {
        let window = self.padded_window(series, t);
        let state = match &self.net {
            Network::Lstm(net) if window.len() > 1 => {
                let prefix: Vec<&[Observation]> = vec![&window[..window.len() - 1]];
                let x = self.input_matrix(&prefix);
                let (_, cache) = net.forward(&x, 1, None)?;
                Some(cache.final_state())
            }
            _ => None,
        };
        Ok(EpochProbe {
            model: self,
            bundle,
            state,
            has_prev: window[window.len() - 1].has_prev,
        })
    }

    /// All network parameters, flattened in tensor order.
    pub fn parameters(&self) -> Vec<f64> {
        match &self.net {
            Network::Lstm(n) => n.flat(),
            Network::Mlp(n) => n.flat(),
        }
    }

    /// Copy with parameter `index` (flattened order) shifted by `delta`.
    pub fn with_parameter_offset(&self, index: usize, delta: f64) -> Self {
        let mut out = self.clone();
        let tensors = match &mut out.net {
            Network::Lstm(n) => n.tensors_mut(),
            Network::Mlp(n) => n.tensors_mut(),
        };
        let mut k = index;
        for t in tensors {
            if k < t.len() {
                t[k] += delta;
                return out;
            }
            k -= t.len();
        }
        panic!("parameter index {index} out of range");
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = CheckpointMeta {
            train: self.config.clone(),
            norm: self.norm.clone(),
            n_buses: self.n_buses,
            reference: self.reference,
        };
        let cfg = serde_json::to_value(&meta).expect("config serializes");
        match &self.net {
            Network::Lstm(n) => Checkpoint::capture(self.variant().name(), cfg, n),
            Network::Mlp(n) => Checkpoint::capture(self.variant().name(), cfg, n),
        }
    }

    pub fn from_checkpoint(case: &GridCase, ck: &Checkpoint) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;
        if meta.n_buses != case.n_buses() || meta.reference != case.reference() {
            return Err(Error::Shape("checkpoint was trained on a different case".into()));
        }
        if ck.kind != meta.train.variant.name() {
            return Err(Error::Parse(format!(
                "checkpoint kind {} disagrees with its config",
                ck.kind
            )));
        }
        let mut model = Self::init(case, meta.train, meta.norm)?;
        match &mut model.net {
            Network::Lstm(n) => ck.restore_into(n)?,
            Network::Mlp(n) => ck.restore_into(n)?,
        }
        Ok(model)
    }
}

/// Estimator for one epoch with its history frozen.
pub struct EpochProbe<'a> {
    model: &'a TrainedModel,
    bundle: &'a MatrixBundle,
    state: Option<LstmState>,
    has_prev: bool,
}

impl EpochProbe<'_> {
    fn observation(&self, z: &[f64]) -> Result<Observation> {
        let n = self.bundle.n_buses();
        let theta_dc = crate::classic_estimation::dc_estimate(self.bundle, &z[..n])?;
        Ok(Observation {
            z: z.to_vec(),
            theta_dc,
            has_prev: self.has_prev,
        })
    }

    pub fn estimate(&self, z: &[f64]) -> Result<StateVector> {
        let obs = self.observation(z)?;
        let x = self.model.input_matrix(&[std::slice::from_ref(&obs)]);
        let y = match &self.model.net {
            Network::Lstm(net) => net.predict(&x, 1, self.state.as_ref())?,
            Network::Mlp(net) => net.predict(&x)?,
        };
        Ok(self.model.decode(y.column(0).as_slice()))
    }

    /// Estimate for `z` and the gradient with respect to `z` of a scalar
    /// function of the estimate, given that function's gradient over `[θ; V]`.
    pub fn estimate_with_grad<F>(&self, z: &[f64], grad_state: F) -> Result<(StateVector, Vec<f64>)>
    where
        F: FnOnce(&StateVector) -> Vec<f64>,
    {
        let model = self.model;
        let obs = self.observation(z)?;
        let x = model.input_matrix(&[std::slice::from_ref(&obs)]);
        let (y, dx) = match &model.net {
            Network::Lstm(net) => {
                let (y, cache) = net.forward(&x, 1, self.state.as_ref())?;
                let est = model.decode(y.column(0).as_slice());
                let g = grad_state(&est);
                let mut dy = Mat::zeros(y.nrows(), 1);
                model.encode_grad(&g, dy.as_mut_slice());
                let (_, dx) = net.backward(&cache, &dy)?;
                (est, dx)
            }
            Network::Mlp(net) => {
                let (y, cache) = net.forward(&x)?;
                let est = model.decode(y.column(0).as_slice());
                let g = grad_state(&est);
                let mut dy = Mat::zeros(y.nrows(), 1);
                model.encode_grad(&g, dy.as_mut_slice());
                let (_, dx) = net.backward(&cache, &dy)?;
                (est, dx)
            }
        };
        // Undo the input map, then route the θ̃ slice through the DC estimate.
        let m = z.len();
        let du: Vec<f64> = (0..dx.nrows()).map(|k| dx[(k, 0)] / model.norm.std[k]).collect();
        let mut dz = du[..m].to_vec();
        if model.variant() == ModelVariant::Chimera {
            let n = self.bundle.n_buses();
            let d_theta_red = nalgebra::DVector::from_iterator(
                self.bundle.non_reference.len(),
                self.bundle.non_reference.iter().map(|&i| du[m + i]),
            );
            let dp = self.bundle.h_dc_pinv.tr_mul(&d_theta_red);
            for i in 0..n {
                dz[i] += dp[i];
            }
        }
        Ok((y, dz))
    }
}

#[cfg(test)]
mod tests;
