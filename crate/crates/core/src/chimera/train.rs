use super::{
    assemble_input, dynamic_loss_grad, static_loss_grad, InputNorm, LossTerms, ModelVariant,
    Network, Observation, TrainConfig, TrainedModel,
};
use crate::dataset::{split_corpus, EpochRecord, Split};
use crate::error::{Error, Result};
use crate::grid_model::{GridCase, MatrixBundle};
use crate::nn::{adam_step, AdamState, Mat, Parameters};
use crate::powerflow::StateVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Training corpus as the estimator sees it. True states are only kept when
/// the variant is supervised by them.
#[derive(Debug, Clone)]
pub struct TrainSet {
    pub observations: Vec<Observation>,
    truth: Option<Vec<StateVector>>,
    pub split: Split,
}

impl TrainSet {
    pub fn from_records(
        records: &[EpochRecord],
        variant: ModelVariant,
        fractions: [f64; 3],
        window: usize,
    ) -> Result<Self> {
        let split = split_corpus(records.len(), fractions, window.max(2))?;
        let truth = variant
            .uses_truth()
            .then(|| records.iter().map(|r| r.x_true.clone()).collect());
        Ok(Self {
            observations: Observation::from_records(records),
            truth,
            split,
        })
    }

    /// Measurement-only set, for the physics-supervised variants.
    pub fn observations_only(observations: Vec<Observation>, split: Split) -> Self {
        Self {
            observations,
            truth: None,
            split,
        }
    }

    pub fn has_truth(&self) -> bool {
        self.truth.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    pub phase: u8,
    pub lr: f64,
    /// For the MLP baseline the supervised error sits in `l_static`.
    pub loss: LossTerms,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValidationEntry {
    /// Number of updates applied when the loss was measured.
    pub iteration: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub entries: Vec<TrainLogEntry>,
    pub validation: Vec<ValidationEntry>,
    pub initial_validation: f64,
    pub best_validation: f64,
    pub best_iteration: usize,
}

struct Batch<'a> {
    model: &'a TrainedModel,
    case: &'a GridCase,
    bundle: &'a MatrixBundle,
    data: &'a TrainSet,
}

impl Batch<'_> {
    /// Loss over windows starting at `starts`, every step counted, and the
    /// gradient with respect to the network output.
    fn loss(&self, starts: &[usize], y: &Mat, want_grad: bool) -> (LossTerms, Option<Mat>) {
        let model = self.model;
        let cfg = &model.config;
        let obs = &self.data.observations;
        let b = starts.len();
        let steps = y.ncols() / b;
        let n = model.n_buses;
        let out_w = model.output_width();
        let mut g_state = vec![vec![0.0; 2 * n]; y.ncols()];
        let mut dy = want_grad.then(|| Mat::zeros(out_w, y.ncols()));

        if let Some(truth) = &self.data.truth {
            let count = (y.ncols() * out_w) as f64;
            let mut sum = 0.0;
            for t in 0..steps {
                for (j, &s) in starts.iter().enumerate() {
                    let col = t * b + j;
                    let est = model.decode(y.column(col).as_slice());
                    let x = &truth[s + t];
                    for &i in &model.non_reference {
                        for (k, (e, v)) in [(est.theta[i], x.theta[i]), (est.v[i], x.v[i])]
                            .into_iter()
                            .enumerate()
                        {
                            let r = e - v;
                            sum += r * r;
                            g_state[col][k * n + i] = 2.0 * r / count;
                        }
                    }
                }
            }
            if let Some(dy) = dy.as_mut() {
                for (col, g) in g_state.iter().enumerate() {
                    model.encode_grad(g, dy.column_mut(col).as_mut_slice());
                }
            }
            return (LossTerms::new(sum / count, 0.0, 0.0), dy);
        }

        let dynamic = cfg.variant == ModelVariant::Chimera;
        let samples = y.ncols() as f64;
        let dyn_count = if dynamic {
            let mut c = 0usize;
            for t in 0..steps {
                for &s in starts {
                    if obs[s + t].has_prev {
                        c += 1;
                    }
                }
            }
            c
        } else {
            0
        };
        let (mut ls, mut ld) = (0.0, 0.0);
        for t in 0..steps {
            for (j, &s) in starts.iter().enumerate() {
                let col = t * b + j;
                let e = s + t;
                let est = model.decode(y.column(col).as_slice());
                let (l, g) = static_loss_grad(self.case, &obs[e].z, &est);
                ls += l;
                for (a, v) in g_state[col].iter_mut().zip(&g) {
                    *a = v / samples;
                }
                if dynamic && obs[e].has_prev {
                    let (l, g) = dynamic_loss_grad(
                        self.bundle,
                        obs[e].p(),
                        obs[e - 1].p(),
                        &est.theta,
                        &obs[e - 1].theta_dc,
                    );
                    ld += l;
                    let w = cfg.gamma / dyn_count as f64;
                    for i in 0..n {
                        g_state[col][i] += w * g[i];
                    }
                }
            }
        }
        let ld = if dyn_count > 0 { ld / dyn_count as f64 } else { 0.0 };
        let gamma = if dynamic { cfg.gamma } else { 0.0 };
        if let Some(dy) = dy.as_mut() {
            for (col, g) in g_state.iter().enumerate() {
                model.encode_grad(g, dy.column_mut(col).as_mut_slice());
            }
        }
        (LossTerms::new(ls / samples, ld, gamma), dy)
    }

    fn forward(&self, starts: &[usize], with_cache: bool) -> Result<(Mat, Option<Cache>)> {
        self.forward_len(starts, self.model.config.window(), with_cache)
    }

    fn forward_len(
        &self,
        starts: &[usize],
        w: usize,
        with_cache: bool,
    ) -> Result<(Mat, Option<Cache>)> {
        let windows: Vec<&[Observation]> = starts
            .iter()
            .map(|&s| &self.data.observations[s..s + w])
            .collect();
        let x = self.model.input_matrix(&windows);
        Ok(match &self.model.net {
            Network::Lstm(net) => {
                let (y, c) = net.forward(&x, starts.len(), None)?;
                (y, with_cache.then_some(Cache::Lstm(c)))
            }
            Network::Mlp(net) => {
                let (y, c) = net.forward(&x)?;
                (y, with_cache.then_some(Cache::Mlp(c)))
            }
        })
    }

    fn validation_loss(&self) -> Result<f64> {
        let val = &self.data.split.validation;
        let w = self.model.config.window().min(val.len()).max(1);
        let starts: Vec<usize> = (val.start..val.end.saturating_sub(w - 1))
            .step_by(w)
            .collect();
        if starts.is_empty() {
            return Ok(f64::NAN);
        }
        let (y, _) = self.forward_len(&starts, w, false)?;
        Ok(self.loss(&starts, &y, false).0.l_total)
    }
}

enum Cache {
    Lstm(crate::nn::LstmCache),
    Mlp(crate::nn::MlpCache),
}

/// Two-phase training: `coarse_iterations` Adam updates at `coarse_lr`, then
/// `fine_iterations` under the triangular schedule. Each iteration is one
/// mini-batch of `batch` windows drawn from the training split. The returned
/// model holds the parameters with the lowest validation loss seen.
pub fn train(
    case: &GridCase,
    bundle: &MatrixBundle,
    data: &TrainSet,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, TrainLog)> {
    cfg.validate()?;
    if cfg.variant.uses_truth() != data.has_truth() {
        return Err(Error::Config(format!(
            "variant {} {} true states",
            cfg.variant,
            if cfg.variant.uses_truth() { "needs" } else { "must not see" }
        )));
    }
    let w = cfg.window();
    let train = data.split.train.clone();
    if train.len() < w {
        return Err(Error::Config(format!(
            "training split of {} epochs is shorter than the window {w}",
            train.len()
        )));
    }
    let width = cfg.variant.input_width(case.n_buses());
    let norm = if cfg.standardize {
        let inputs: Vec<Vec<f64>> = data.observations[train.clone()]
            .iter()
            .map(|o| assemble_input(cfg.variant, o))
            .collect();
        InputNorm::fit(&inputs)
    } else {
        InputNorm::identity(width)
    };
    let mut model = TrainedModel::init(case, cfg.clone(), norm)?;
    let mut adam = match &model.net {
        Network::Lstm(n) => AdamState::new(n),
        Network::Mlp(n) => AdamState::new(n),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let initial = Batch { model: &model, case, bundle, data }.validation_loss()?;
    let mut best = (initial, 0usize, model.net.clone());
    let mut log = TrainLog {
        entries: Vec::with_capacity(cfg.total_iterations()),
        validation: vec![ValidationEntry { iteration: 0, loss: initial }],
        initial_validation: initial,
        best_validation: initial,
        best_iteration: 0,
    };

    for it in 0..cfg.total_iterations() {
        let (phase, lr) = if it < cfg.coarse_iterations {
            (1, cfg.coarse_lr)
        } else {
            (2, cfg.schedule.lr_at((it - cfg.coarse_iterations) as u64))
        };
        let starts: Vec<usize> = (0..cfg.batch)
            .map(|_| rng.random_range(train.start..=train.end - w))
            .collect();
        let batch = Batch { model: &model, case, bundle, data };
        let (y, cache) = batch.forward(&starts, true)?;
        let (terms, dy) = batch.loss(&starts, &y, true);
        if !terms.l_total.is_finite() {
            return Err(Error::TrainingDiverged {
                iteration: it,
                loss: terms.l_total,
            });
        }
        let dy = dy.expect("gradient requested");
        match (&mut model.net, cache.expect("cache requested")) {
            (Network::Lstm(net), Cache::Lstm(c)) => {
                let (g, _) = net.backward(&c, &dy)?;
                adam_step(net, &g, &mut adam, lr);
            }
            (Network::Mlp(net), Cache::Mlp(c)) => {
                let (g, _) = net.backward(&c, &dy)?;
                adam_step(net, &g, &mut adam, lr);
            }
            _ => unreachable!("cache kind follows the network"),
        }
        log.entries.push(TrainLogEntry {
            iteration: it,
            phase,
            lr,
            loss: terms,
        });

        let done = it + 1;
        if done % cfg.validation_interval.max(1) == 0 || done == cfg.total_iterations() {
            let v = Batch { model: &model, case, bundle, data }.validation_loss()?;
            if !v.is_finite() && initial.is_finite() {
                return Err(Error::TrainingDiverged {
                    iteration: it,
                    loss: v,
                });
            }
            log.validation.push(ValidationEntry {
                iteration: done,
                loss: v,
            });
            if v < best.0 || best.0.is_nan() {
                best = (v, done, model.net.clone());
            }
        }
    }
    log.best_validation = best.0;
    log.best_iteration = best.1;
    if best.1 != cfg.total_iterations() {
        model.net = best.2;
    }
    log::info!(
        "{}: validation loss {:.3e} -> {:.3e} (iteration {})",
        cfg.variant,
        initial,
        best.0,
        best.1
    );
    Ok((model, log))
}

/// Training loss of `model` over windows starting at `starts` and its
/// gradient over every network parameter, flattened in tensor order.
pub fn loss_and_gradient(
    model: &TrainedModel,
    case: &GridCase,
    bundle: &MatrixBundle,
    data: &TrainSet,
    starts: &[usize],
) -> Result<(LossTerms, Vec<f64>)> {
    let batch = Batch { model, case, bundle, data };
    let (y, cache) = batch.forward(starts, true)?;
    let (terms, dy) = batch.loss(starts, &y, true);
    let dy = dy.expect("gradient requested");
    let grad = match (&model.net, cache.expect("cache requested")) {
        (Network::Lstm(net), Cache::Lstm(c)) => net.backward(&c, &dy)?.0.flat(),
        (Network::Mlp(net), Cache::Mlp(c)) => net.backward(&c, &dy)?.0.flat(),
        _ => unreachable!("cache kind follows the network"),
    };
    Ok((terms, grad))
}
