//! Stealthy false-data-injection synthesis against a state estimator.
//!
//! The attacker picks the line closest to overload under the worst single
//! outage and runs projected Adam ascent on
//! `|f'_target| − ρ·max(0, J − τ)` over the meters it controls.

use crate::chimera::{EpochProbe, TrainedModel};
use crate::classic_estimation::{bdd_check, dc_estimate, wls_estimate, ResidualNorm, Verdict, WlsConfig};
use crate::contingency::Screener;
use crate::error::{Error, Result};
use crate::grid_model::{GridCase, MatrixBundle};
use crate::powerflow::{dc_line_flows, h_measure, measurement_jacobian, StateVector};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

/// `a = H c` over the active-power meters: leaves the DC residual unchanged.
pub fn stealthy_injection(bundle: &MatrixBundle, c: &[f64]) -> Vec<f64> {
    (&bundle.h_dc * DVector::from_column_slice(c)).as_slice().to_vec()
}

/// Line with the smallest positive headroom `limit − |f'|` among lines that
/// keep at least `f_m` of headroom. Non-finite flows (an outaged line) are
/// skipped. Ties go to the lowest branch id.
pub fn select_target_line(flows: &[f64], limits: &[f64], ids: &[u32], f_m: f64) -> Result<u32> {
    let mut best: Option<(f64, u32)> = None;
    for ((&f, &lim), &id) in flows.iter().zip(limits).zip(ids) {
        if !f.is_finite() || f.abs() >= lim - f_m {
            continue;
        }
        let margin = lim - f.abs();
        let better = match best {
            None => true,
            Some((m, bid)) => margin < m || (margin == m && id < bid),
        };
        if better {
            best = Some((margin, id));
        }
    }
    best.map(|(_, id)| id).ok_or(Error::NoTarget)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Meter indices (into `z`) the attacker may alter.
    pub target_meters: Vec<usize>,
    pub tau: f64,
    /// Safety margin on the target line, per-unit.
    pub f_m: f64,
    /// Adam step size in attack units (see `unit_scale`).
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Per-meter bound on |a|, per-unit.
    pub magnitude_cap: f64,
    pub seed: u64,
    /// Exterior penalty weight on BDD violation.
    pub penalty: f64,
    /// Attack units per per-unit; the optimizer works in `a · unit_scale`.
    pub unit_scale: f64,
    /// Central-difference step (per-unit) for estimators without gradients.
    pub fd_step: f64,
    /// Restrict `a` to the range of the DC Jacobian (all active-power meters).
    pub range_of_h: bool,
    /// Consider every single outage rather than only the worst one.
    pub sweep_all_outages: bool,
}

impl AttackConfig {
    /// Active-power meters at buses 1–5, a 3 MW margin and MW-valued steps.
    pub fn for_case(case: &GridCase) -> Self {
        let target_meters = (1..=5).filter_map(|id| case.bus_index(id)).collect();
        Self {
            target_meters,
            tau: crate::classic_estimation::DEFAULT_TAU,
            f_m: 3.0 / case.base_mva,
            learning_rate: 1e-2,
            max_steps: 55,
            magnitude_cap: 0.05,
            seed: 0,
            penalty: 100.0,
            unit_scale: case.base_mva,
            fd_step: 1e-4,
            range_of_h: false,
            sweep_all_outages: false,
        }
    }

    pub fn validate(&self, m: usize, n: usize) -> Result<()> {
        let bad = |s: &str| Err(Error::Config(s.to_string()));
        if self.target_meters.is_empty() {
            return bad("target meter set is empty");
        }
        if self.target_meters.iter().any(|&k| k >= m) {
            return bad("target meter index out of range");
        }
        if self.range_of_h && !(0..n).all(|k| self.target_meters.contains(&k)) {
            return bad("range-of-H attacks need every active-power meter");
        }
        if !(self.f_m >= 0.0) || !(self.learning_rate > 0.0) || !(self.magnitude_cap >= 0.0) {
            return bad("need f_m >= 0, learning_rate > 0, magnitude_cap >= 0");
        }
        if !(self.unit_scale > 0.0) || !(self.fd_step > 0.0) {
            return bad("unit scale and finite-difference step must be positive");
        }
        Ok(())
    }
}

/// Estimator under attack, together with the residual test guarding it.
pub trait TargetEstimator {
    fn estimate(&self, z: &[f64]) -> Result<StateVector>;

    /// Bad-data objective of `z` against estimate `x`.
    fn residual(&self, z: &[f64], x: &StateVector) -> f64;

    /// `(∂J/∂z` at fixed `x`, `∂J/∂[θ; V]` at fixed `z)`.
    fn residual_grad(&self, z: &[f64], x: &StateVector) -> (Vec<f64>, Vec<f64>);

    /// Estimate and the gradient over `z` of `g·x̂`, where `g = grad_state(x̂)`
    /// is held fixed. Only entries in `support` are required. The default
    /// uses central differences of step `step`.
    fn estimate_with_grad(
        &self,
        z: &[f64],
        grad_state: &dyn Fn(&StateVector) -> Vec<f64>,
        support: &[usize],
        step: f64,
    ) -> Result<(StateVector, Vec<f64>)> {
        let x = self.estimate(z)?;
        let g = grad_state(&x);
        let mut dz = vec![0.0; z.len()];
        let mut zp = z.to_vec();
        for &k in support {
            zp[k] = z[k] + step;
            let up = self.estimate(&zp)?.concat();
            zp[k] = z[k] - step;
            let dn = self.estimate(&zp)?.concat();
            zp[k] = z[k];
            dz[k] = g
                .iter()
                .zip(up.iter().zip(&dn))
                .map(|(gi, (u, d))| gi * (u - d))
                .sum::<f64>()
                / (2.0 * step);
        }
        Ok((x, dz))
    }
}

fn ac_residual(case: &GridCase, norm: &ResidualNorm, z: &[f64], x: &StateVector) -> f64 {
    norm.objective(z, &h_measure(case, x))
}

fn ac_residual_grad(
    case: &GridCase,
    norm: &ResidualNorm,
    z: &[f64],
    x: &StateVector,
) -> (Vec<f64>, Vec<f64>) {
    let hx = h_measure(case, x);
    let g_h = norm.grad_hx(z, &hx);
    let g_z: Vec<f64> = g_h.iter().map(|v| -v).collect();
    let jac = measurement_jacobian(case, x);
    let g_x = jac.tr_mul(&DVector::from_vec(g_h));
    (g_z, g_x.as_slice().to_vec())
}

/// Gauss–Newton WLS with its own residual test.
pub struct WlsTarget<'a> {
    pub case: &'a GridCase,
    pub config: WlsConfig,
}

impl TargetEstimator for WlsTarget<'_> {
    fn estimate(&self, z: &[f64]) -> Result<StateVector> {
        Ok(wls_estimate(self.case, z, &self.config)?.x_hat)
    }

    fn residual(&self, z: &[f64], x: &StateVector) -> f64 {
        ac_residual(self.case, &self.config.norm, z, x)
    }

    fn residual_grad(&self, z: &[f64], x: &StateVector) -> (Vec<f64>, Vec<f64>) {
        ac_residual_grad(self.case, &self.config.norm, z, x)
    }
}

/// Closed-form DC estimate, residual over the active-power meters only.
pub struct DcTarget<'a> {
    pub bundle: &'a MatrixBundle,
    /// Weights over the `n` active-power meters.
    pub norm: ResidualNorm,
}

impl DcTarget<'_> {
    fn mismatch(&self, z: &[f64], x: &StateVector) -> Vec<f64> {
        let n = self.bundle.n_buses();
        let p_hat = self.bundle.dc_injections(&x.theta);
        (0..n).map(|k| z[k] - p_hat[k]).collect()
    }
}

impl TargetEstimator for DcTarget<'_> {
    fn estimate(&self, z: &[f64]) -> Result<StateVector> {
        let n = self.bundle.n_buses();
        let theta = dc_estimate(self.bundle, &z[..n])?;
        Ok(StateVector {
            theta,
            v: vec![1.0; n],
        })
    }

    fn residual(&self, z: &[f64], x: &StateVector) -> f64 {
        let r = self.mismatch(z, x);
        self.norm.objective(&r, &vec![0.0; r.len()])
    }

    fn residual_grad(&self, z: &[f64], x: &StateVector) -> (Vec<f64>, Vec<f64>) {
        let n = self.bundle.n_buses();
        let r = self.mismatch(z, x);
        // ∂J/∂r with r = P − Hθ, so ∂J/∂P = ∂J/∂r and ∂J/∂θ = −Hᵀ ∂J/∂r.
        let g_r = self.norm.grad_hx(&vec![0.0; n], &r);
        let mut g_z = vec![0.0; z.len()];
        g_z[..n].copy_from_slice(&g_r);
        let g_red = self.bundle.h_dc.tr_mul(&DVector::from_vec(g_r)) * -1.0;
        let mut g_x = vec![0.0; 2 * n];
        for (k, &i) in self.bundle.non_reference.iter().enumerate() {
            g_x[i] = g_red[k];
        }
        (g_z, g_x)
    }
}

/// A trained network at one epoch, history frozen, white-box gradients.
pub struct NeuralTarget<'a> {
    pub case: &'a GridCase,
    pub probe: EpochProbe<'a>,
    pub norm: ResidualNorm,
}

impl<'a> NeuralTarget<'a> {
    pub fn new(
        case: &'a GridCase,
        bundle: &'a MatrixBundle,
        model: &'a TrainedModel,
        series: &[crate::chimera::Observation],
        t: usize,
        norm: ResidualNorm,
    ) -> Result<Self> {
        Ok(Self {
            case,
            probe: model.probe(bundle, series, t)?,
            norm,
        })
    }
}

impl TargetEstimator for NeuralTarget<'_> {
    fn estimate(&self, z: &[f64]) -> Result<StateVector> {
        self.probe.estimate(z)
    }

    fn residual(&self, z: &[f64], x: &StateVector) -> f64 {
        ac_residual(self.case, &self.norm, z, x)
    }

    fn residual_grad(&self, z: &[f64], x: &StateVector) -> (Vec<f64>, Vec<f64>) {
        ac_residual_grad(self.case, &self.norm, z, x)
    }

    fn estimate_with_grad(
        &self,
        z: &[f64],
        grad_state: &dyn Fn(&StateVector) -> Vec<f64>,
        _support: &[usize],
        _step: f64,
    ) -> Result<(StateVector, Vec<f64>)> {
        self.probe.estimate_with_grad(z, grad_state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    Attacked,
    /// No line keeps the safety margin under any usable outage.
    NoTarget,
    /// The clean measurements already fail the residual test.
    CleanBadData,
    EstimatorFailed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub epoch: usize,
    pub status: AttackStatus,
    /// Injected vector over all meters, per-unit.
    pub a: Vec<f64>,
    /// Estimate shift `x̂ₐ − x̂` as stacked `[θ; V]`.
    pub c: Vec<f64>,
    pub x_clean: Option<StateVector>,
    #[serde(with = "nan_as_null")]
    pub j_clean: f64,
    #[serde(with = "nan_as_null")]
    pub j_attacked: f64,
    pub target_line: Option<u32>,
    pub outage: Option<u32>,
    #[serde(with = "nan_as_null")]
    pub limit: f64,
    #[serde(with = "nan_as_null")]
    pub f_prime_before: f64,
    #[serde(with = "nan_as_null")]
    pub f_prime_after: f64,
    pub stealthy: bool,
    pub effective: bool,
    pub steps: usize,
    pub accepted_steps: usize,
    pub n1_clean: usize,
    pub n2_clean: usize,
    pub n1_attacked: usize,
    pub n2_attacked: usize,
    pub message: Option<String>,
}

/// JSON has no NaN; skipped epochs store their undefined quantities as null.
mod nan_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
    }
}

impl AttackResult {
    pub fn skipped(epoch: usize, m: usize, status: AttackStatus, message: String) -> Self {
        Self {
            epoch,
            status,
            a: vec![0.0; m],
            c: Vec::new(),
            x_clean: None,
            j_clean: f64::NAN,
            j_attacked: f64::NAN,
            target_line: None,
            outage: None,
            limit: f64::NAN,
            f_prime_before: f64::NAN,
            f_prime_after: f64::NAN,
            stealthy: false,
            effective: false,
            steps: 0,
            accepted_steps: 0,
            n1_clean: 0,
            n2_clean: 0,
            n1_attacked: 0,
            n2_attacked: 0,
            message: Some(message),
        }
    }

    pub fn attacked(&self) -> bool {
        self.status == AttackStatus::Attacked
    }

    /// Attacked estimate, `x̂ + c`.
    pub fn x_attacked(&self) -> Option<StateVector> {
        let x = self.x_clean.as_ref()?;
        let n = x.n_buses();
        Some(StateVector {
            theta: (0..n).map(|i| x.theta[i] + self.c[i]).collect(),
            v: (0..n).map(|i| x.v[i] + self.c[n + i]).collect(),
        })
    }

    pub fn mean_abs_injection(&self, support: &[usize]) -> f64 {
        support.iter().map(|&k| self.a[k].abs()).sum::<f64>() / support.len() as f64
    }
}

/// Outage and target line fixed for one epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackTarget {
    /// Branch positions.
    pub line: usize,
    pub outage: usize,
    pub lodf: f64,
}

/// Every usable single outage with the target line it exposes and the
/// headroom left on that line.
pub fn outage_targets(
    screener: &Screener,
    flows: &[f64],
    limits: &[f64],
    ids: &[u32],
    f_m: f64,
) -> Vec<(AttackTarget, f64)> {
    let table = screener.table();
    let mut out = Vec::new();
    for j in 0..flows.len() {
        let Some(mut post) = screener.single_outage(flows, j) else {
            continue;
        };
        post[j] = f64::NAN;
        let Ok(id) = select_target_line(&post, limits, ids, f_m) else {
            continue;
        };
        let i = ids.iter().position(|&b| b == id).expect("id from list");
        let target = AttackTarget {
            line: i,
            outage: j,
            lodf: table.lodf[(i, j)],
        };
        out.push((target, limits[i] - post[i].abs()));
    }
    out
}

/// Worst single outage: the one leaving a feasible line with the least
/// headroom. Ties go to the lower outage position.
pub fn choose_target(
    screener: &Screener,
    flows: &[f64],
    limits: &[f64],
    ids: &[u32],
    f_m: f64,
) -> Result<AttackTarget> {
    outage_targets(screener, flows, limits, ids, f_m)
        .into_iter()
        .fold(None::<(AttackTarget, f64)>, |best, (t, m)| match best {
            Some((_, bm)) if bm <= m => best,
            _ => Some((t, m)),
        })
        .map(|(t, _)| t)
        .ok_or(Error::NoTarget)
}

/// Post-outage flow of the target and its gradient over all-bus `θ`.
fn target_flow(bundle: &MatrixBundle, tgt: &AttackTarget, theta: &[f64]) -> (f64, Vec<f64>) {
    let mut w = vec![0.0; bundle.n_buses()];
    for (k, scale) in [(tgt.line, 1.0), (tgt.outage, tgt.lodf)] {
        let (f, t) = bundle.branch_ends[k];
        let b = bundle.y[(k, k)] * scale;
        w[f] += b;
        w[t] -= b;
    }
    let flow = w.iter().zip(theta).map(|(a, b)| a * b).sum();
    (flow, w)
}

struct Evaluated {
    x: StateVector,
    j: f64,
    flow: f64,
    objective: f64,
}

/// Synthesizes one attack against `estimator` for clean measurements `z`.
pub fn optimize_attack(
    case: &GridCase,
    bundle: &MatrixBundle,
    screener: &Screener,
    z: &[f64],
    estimator: &dyn TargetEstimator,
    cfg: &AttackConfig,
    epoch: usize,
) -> Result<AttackResult> {
    let m = z.len();
    let n = case.n_buses();
    cfg.validate(m, n)?;
    let limits = case.limits();
    let ids: Vec<u32> = case.branches.iter().map(|b| b.id).collect();

    let x_clean = estimator.estimate(z)?;
    let j_clean = estimator.residual(z, &x_clean);
    if bdd_check(j_clean, cfg.tau) == Verdict::BadData {
        return Ok(AttackResult::skipped(
            epoch,
            m,
            AttackStatus::CleanBadData,
            format!("clean residual {j_clean:.4} is not below {}", cfg.tau),
        ));
    }
    let flows = dc_line_flows(bundle, &x_clean.theta).0;
    let (n1_clean, n2_clean) = screener.counts(&flows, &limits);
    let targets: Vec<AttackTarget> = if cfg.sweep_all_outages {
        let all = outage_targets(screener, &flows, &limits, &ids, cfg.f_m);
        if all.is_empty() {
            return Err(Error::NoTarget);
        }
        all.into_iter().map(|(t, _)| t).collect()
    } else {
        vec![choose_target(screener, &flows, &limits, &ids, cfg.f_m)?]
    };

    let mut best: Option<AttackResult> = None;
    for tgt in targets {
        let r = ascend(case, bundle, screener, z, estimator, cfg, epoch, &x_clean, j_clean, tgt)?;
        let r = AttackResult {
            n1_clean,
            n2_clean,
            ..r
        };
        let r = AttackResult {
            effective: r.n1_attacked != n1_clean || r.n2_attacked != n2_clean,
            ..r
        };
        let gain = |r: &AttackResult| r.f_prime_after.abs() / r.limit;
        if best.as_ref().is_none_or(|b| gain(&r) > gain(b)) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one target"))
}

#[allow(clippy::too_many_arguments)]
fn ascend(
    case: &GridCase,
    bundle: &MatrixBundle,
    screener: &Screener,
    z: &[f64],
    estimator: &dyn TargetEstimator,
    cfg: &AttackConfig,
    epoch: usize,
    x_clean: &StateVector,
    j_clean: f64,
    tgt: AttackTarget,
) -> Result<AttackResult> {
    let m = z.len();
    let n = case.n_buses();
    let limits = case.limits();
    let limit = limits[tgt.line];
    let support: Vec<usize> = if cfg.range_of_h {
        (0..n).collect()
    } else {
        let mut s = cfg.target_meters.clone();
        s.sort_unstable();
        s.dedup();
        s
    };
    // Optimization variable: per-meter injections, or angle shifts c with a = Hc.
    let dim = if cfg.range_of_h { n - 1 } else { support.len() };
    let to_injection = |v: &[f64]| -> Vec<f64> {
        let mut a = vec![0.0; m];
        if cfg.range_of_h {
            let c: Vec<f64> = v.iter().map(|x| x / cfg.unit_scale).collect();
            let hc = stealthy_injection(bundle, &c);
            for k in 0..n {
                a[k] = hc[k].clamp(-cfg.magnitude_cap, cfg.magnitude_cap);
            }
        } else {
            for (&k, x) in support.iter().zip(v) {
                a[k] = (x / cfg.unit_scale).clamp(-cfg.magnitude_cap, cfg.magnitude_cap);
            }
        }
        a
    };
    let evaluate = |a: &[f64]| -> Result<Evaluated> {
        let za: Vec<f64> = z.iter().zip(a).map(|(p, q)| p + q).collect();
        let x = estimator.estimate(&za)?;
        let j = estimator.residual(&za, &x);
        let (flow, _) = target_flow(bundle, &tgt, &x.theta);
        let objective = flow.abs() - cfg.penalty * (j - cfg.tau).max(0.0);
        Ok(Evaluated { x, j, flow, objective })
    };

    let (f_before, _) = target_flow(bundle, &tgt, &x_clean.theta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut v: Vec<f64> = (0..dim)
        .map(|_| rng.random_range(-cfg.learning_rate..=cfg.learning_rate))
        .collect();
    if cfg.magnitude_cap == 0.0 {
        v.fill(0.0);
    }
    let mut a = to_injection(&v);
    let mut cur = evaluate(&a)?;
    if cur.j >= cfg.tau {
        v.fill(0.0);
        a = to_injection(&v);
        cur = evaluate(&a)?;
    }
    // Best stealthy iterate seen; the clean point qualifies by precondition.
    let mut best_stealthy = (a.clone(), Evaluated { x: cur.x.clone(), ..cur });
    if best_stealthy.1.j >= cfg.tau {
        best_stealthy = (
            vec![0.0; m],
            Evaluated {
                x: x_clean.clone(),
                j: j_clean,
                flow: f_before,
                objective: f_before.abs(),
            },
        );
    }

    let (b1, b2, eps) = (0.9, 0.999, 1e-8);
    let mut mom = vec![0.0; dim];
    let mut vel = vec![0.0; dim];
    let mut lr = cfg.learning_rate;
    let (mut steps, mut accepted) = (0, 0);
    let overloaded = |e: &Evaluated| e.flow.abs() > limit;
    while steps < cfg.max_steps && cfg.magnitude_cap > 0.0 && !overloaded(&cur) {
        steps += 1;
        // Gradient of the objective over z at the current point.
        let za: Vec<f64> = z.iter().zip(&a).map(|(p, q)| p + q).collect();
        let penalized = cur.j > cfg.tau;
        let sign = cur.flow.signum();
        let grad_state = |x: &StateVector| -> Vec<f64> {
            let (_, w) = target_flow(bundle, &tgt, &x.theta);
            let mut g = vec![0.0; 2 * n];
            for i in 0..n {
                g[i] = sign * w[i];
            }
            if penalized {
                let (_, gx) = estimator.residual_grad(&za, x);
                for (gi, v) in g.iter_mut().zip(&gx) {
                    *gi -= cfg.penalty * v;
                }
            }
            g
        };
        let (_, mut g_z) = estimator.estimate_with_grad(&za, &grad_state, &support, cfg.fd_step)?;
        if penalized {
            let (gz_direct, _) = estimator.residual_grad(&za, &cur.x);
            for (g, d) in g_z.iter_mut().zip(&gz_direct) {
                *g -= cfg.penalty * d;
            }
        }
        // Chain to the optimization variable (attack units).
        let g_v: Vec<f64> = if cfg.range_of_h {
            let g_p = DVector::from_column_slice(&g_z[..n]);
            (bundle.h_dc.tr_mul(&g_p) / cfg.unit_scale).as_slice().to_vec()
        } else {
            support.iter().map(|&k| g_z[k] / cfg.unit_scale).collect()
        };
        if g_v.iter().all(|g| *g == 0.0) {
            break;
        }
        let t = (accepted + 1) as i32;
        let mut proposal = v.clone();
        for k in 0..dim {
            mom[k] = b1 * mom[k] + (1.0 - b1) * g_v[k];
            vel[k] = b2 * vel[k] + (1.0 - b2) * g_v[k] * g_v[k];
            let m_hat = mom[k] / (1.0 - b1.powi(t));
            let v_hat = vel[k] / (1.0 - b2.powi(t));
            proposal[k] += lr * m_hat / (v_hat.sqrt() + eps);
        }
        let cap = cfg.magnitude_cap * cfg.unit_scale;
        if !cfg.range_of_h {
            for p in &mut proposal {
                *p = p.clamp(-cap, cap);
            }
        }
        let a_new = to_injection(&proposal);
        let next = evaluate(&a_new)?;
        if next.objective >= cur.objective {
            accepted += 1;
            v = proposal;
            a = a_new;
            cur = next;
            if cur.j < cfg.tau && cur.objective >= best_stealthy.1.objective {
                best_stealthy = (a.clone(), Evaluated { x: cur.x.clone(), ..cur });
            }
        } else {
            lr *= 0.5;
            if lr < cfg.learning_rate * 1e-6 {
                break;
            }
        }
    }

    let (a, fin) = best_stealthy;
    let flows_a = dc_line_flows(bundle, &fin.x.theta).0;
    let (n1_attacked, n2_attacked) = screener.counts(&flows_a, &limits);
    let xc = x_clean.concat();
    let c: Vec<f64> = fin.x.concat().iter().zip(&xc).map(|(p, q)| p - q).collect();
    Ok(AttackResult {
        epoch,
        status: AttackStatus::Attacked,
        a,
        c,
        x_clean: Some(x_clean.clone()),
        j_clean,
        j_attacked: fin.j,
        target_line: Some(case.branches[tgt.line].id),
        outage: Some(case.branches[tgt.outage].id),
        limit,
        f_prime_before: f_before,
        f_prime_after: fin.flow,
        stealthy: fin.j < cfg.tau,
        effective: false,
        steps,
        accepted_steps: accepted,
        n1_clean: 0,
        n2_clean: 0,
        n1_attacked,
        n2_attacked,
        message: None,
    })
}

/// [`optimize_attack`] with per-epoch failures recorded instead of raised.
pub fn attack_epoch(
    case: &GridCase,
    bundle: &MatrixBundle,
    screener: &Screener,
    z: &[f64],
    estimator: &dyn TargetEstimator,
    cfg: &AttackConfig,
    epoch: usize,
) -> AttackResult {
    match optimize_attack(case, bundle, screener, z, estimator, cfg, epoch) {
        Ok(r) => r,
        Err(Error::NoTarget) => {
            log::info!("epoch {epoch}: no feasible target line");
            AttackResult::skipped(epoch, z.len(), AttackStatus::NoTarget, "no feasible target line".into())
        }
        Err(e) => {
            log::warn!("epoch {epoch}: attack failed: {e}");
            AttackResult::skipped(epoch, z.len(), AttackStatus::EstimatorFailed, e.to_string())
        }
    }
}

pub fn write_campaign<W: Write>(results: &[AttackResult], mut out: W) -> Result<()> {
    for r in results {
        let line = serde_json::to_string(r).map_err(|e| Error::Parse(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io("<campaign>", e))?;
    }
    Ok(())
}

pub fn read_campaign<R: BufRead>(input: R) -> Result<Vec<AttackResult>> {
    let mut out = Vec::new();
    for (k, line) in input.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<campaign>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::Parse(format!("campaign line {}: {e}", k + 1)))?,
        );
    }
    Ok(out)
}

/// Residual weights whose objective puts the `quantile` of `raw` clean
/// residuals exactly at `tau`, so every estimator faces the same false-alarm
/// rate on clean data.
pub fn calibrated_norm(m: usize, sigma: f64, raw: &[f64], tau: f64, quantile: f64) -> Result<ResidualNorm> {
    if raw.is_empty() {
        return Err(Error::Config("no clean residuals to calibrate against".into()));
    }
    let mut sorted: Vec<f64> = raw.to_vec();
    sorted.sort_by(f64::total_cmp);
    let idx = ((sorted.len() as f64 * quantile).ceil() as usize).clamp(1, sorted.len()) - 1;
    let q = sorted[idx];
    if !(q > 0.0) || !q.is_finite() {
        return Err(Error::Config(format!("degenerate residual quantile {q}")));
    }
    let mut norm = ResidualNorm::uniform(m, sigma);
    norm.scale = tau / q;
    Ok(norm)
}
