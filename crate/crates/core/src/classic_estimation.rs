//! Weighted-least-squares AC state estimation, residual bad-data detection
//! and the closed-form DC angle estimate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{GridCase, MatrixBundle};
use crate::powerflow::{h_measure, measurement_jacobian, StateVector};

/// Meter noise standard deviation assumed by the default weights.
pub const DEFAULT_SIGMA: f64 = 0.01;
/// Default bad-data threshold on the normalized residual.
pub const DEFAULT_TAU: f64 = 0.5;

/// Weighted residual objective `J = scale · Σ wᵢ (zᵢ − hᵢ)²`.
///
/// With `scale = 1/m` the objective is the mean squared normalized residual;
/// that is the normalization the bad-data threshold is expressed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualNorm {
    pub weights: Vec<f64>,
    pub scale: f64,
}

impl ResidualNorm {
    pub fn uniform(m: usize, sigma: f64) -> Self {
        Self {
            weights: vec![sigma.powi(-2); m],
            scale: 1.0 / m as f64,
        }
    }

    pub fn raw(&self, z: &[f64], hx: &[f64]) -> f64 {
        z.iter()
            .zip(hx)
            .zip(&self.weights)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum()
    }

    pub fn objective(&self, z: &[f64], hx: &[f64]) -> f64 {
        self.scale * self.raw(z, hx)
    }

    /// `∂J/∂(hx)`; the gradient with respect to `z` is its negation.
    pub fn grad_hx(&self, z: &[f64], hx: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(hx)
            .zip(&self.weights)
            .map(|((a, b), w)| -2.0 * self.scale * w * (a - b))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WlsConfig {
    pub norm: ResidualNorm,
    /// Convergence tolerance on ‖Δx‖∞.
    pub tol: f64,
    pub max_iter: usize,
    pub tau: f64,
}

impl WlsConfig {
    pub fn for_case(case: &GridCase) -> Self {
        Self {
            norm: ResidualNorm::uniform(case.n_meters(), DEFAULT_SIGMA),
            tol: 1e-8,
            max_iter: 50,
            tau: DEFAULT_TAU,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.norm.weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::Config("WLS weights must be positive".into()));
        }
        if !(self.tol > 0.0) || !(self.tau > 0.0) || !(self.norm.scale > 0.0) {
            return Err(Error::Config("tol, tau and scale must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateResult {
    pub x_hat: StateVector,
    /// Normalized objective, the quantity compared against τ.
    pub j: f64,
    /// Unscaled weighted sum of squared residuals.
    pub j_raw: f64,
    /// ‖z − h(x̂)‖₂.
    pub r_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Clean,
    BadData,
}

/// Clean iff `j < tau`.
pub fn bdd_check(j: f64, tau: f64) -> Verdict {
    if j < tau {
        Verdict::Clean
    } else {
        Verdict::BadData
    }
}

impl EstimateResult {
    pub fn verdict(&self, tau: f64) -> Verdict {
        bdd_check(self.j, tau)
    }
}

/// Jacobian columns of the estimated states: angles and magnitudes at every
/// non-reference bus. The reference bus is the slack, held at θ = 0 and
/// V = 1; with injection-only meters on lossless branches a uniform rescaling
/// of every magnitude is otherwise nearly invisible to the residual.
pub fn estimated_columns(case: &GridCase) -> Vec<usize> {
    let n = case.n_buses();
    let non_ref = case.non_reference();
    non_ref.iter().copied().chain(non_ref.iter().map(|&i| n + i)).collect()
}

/// Gauss-Newton on the normal equations `HᵀWH Δx = HᵀW (z − h(x))` from a
/// flat start.
pub fn wls_estimate(case: &GridCase, z: &[f64], cfg: &WlsConfig) -> Result<EstimateResult> {
    let n = case.n_buses();
    let m = case.n_meters();
    if z.len() != m || cfg.norm.weights.len() != m {
        return Err(Error::Shape(format!("expected {m} measurements")));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(Error::Config("measurements must be finite".into()));
    }
    let non_ref = case.non_reference();
    let cols = estimated_columns(case);
    if m < cols.len() {
        return Err(Error::Unobservable(format!(
            "{m} measurements for {} states",
            cols.len()
        )));
    }
    let w = DVector::from_column_slice(&cfg.norm.weights);

    let mut x = StateVector::flat(n);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < cfg.max_iter {
        iterations += 1;
        let hx = h_measure(case, &x);
        let r = DVector::from_iterator(m, z.iter().zip(&hx).map(|(a, b)| a - b));
        let h = measurement_jacobian(case, &x).select_columns(&cols);
        let ht_w = scale_columns(h.transpose(), &w);
        let gain = &ht_w * &h;
        let rhs = &ht_w * &r;
        let dx = gain
            .cholesky()
            .ok_or_else(|| Error::Unobservable("gain matrix HᵀWH is singular".into()))?
            .solve(&rhs);
        for (k, &i) in non_ref.iter().enumerate() {
            x.theta[i] += dx[k];
            x.v[i] += dx[non_ref.len() + k];
        }
        if dx.amax() < cfg.tol {
            converged = true;
            break;
        }
    }

    let hx = h_measure(case, &x);
    let r_norm = z
        .iter()
        .zip(&hx)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let j_raw = cfg.norm.raw(z, &hx);
    Ok(EstimateResult {
        x_hat: x,
        j: cfg.norm.scale * j_raw,
        j_raw,
        r_norm,
        converged,
        iterations,
    })
}

fn scale_columns(mut mat: DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    for (mut col, &wk) in mat.column_iter_mut().zip(w.iter()) {
        col *= wk;
    }
    mat
}

/// `θ̃ = (HᵀH)⁻¹HᵀP` over all-bus active injections, reference angle 0.
pub fn dc_estimate(bundle: &MatrixBundle, p: &[f64]) -> Result<Vec<f64>> {
    if p.len() != bundle.n_buses() {
        return Err(Error::Shape(format!(
            "expected {} active-power measurements, got {}",
            bundle.n_buses(),
            p.len()
        )));
    }
    let theta_red = &bundle.h_dc_pinv * DVector::from_column_slice(p);
    Ok(bundle.expand(&theta_red))
}

/// ‖P − H θ̃‖₂ for a DC estimate.
pub fn dc_residual(bundle: &MatrixBundle, p: &[f64], theta: &[f64]) -> f64 {
    (DVector::from_column_slice(p) - bundle.dc_injections(theta)).norm()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::build_matrices;
    use crate::powerflow::solve_ac_power_flow;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn base_state(case: &GridCase) -> StateVector {
        solve_ac_power_flow(case, &case.p_loads(), &case.q_loads())
            .unwrap()
            .state
    }

    #[test]
    fn noise_free_measurements_are_a_fixed_point() {
        let case = GridCase::ieee14();
        let x = base_state(&case);
        let z = h_measure(&case, &x);
        let res = wls_estimate(&case, &z, &WlsConfig::for_case(&case)).unwrap();
        assert!(res.converged);
        assert!(res.x_hat.max_abs_diff(&x) < 1e-6);
        assert!(res.j < 1e-12);
        assert_eq!(res.verdict(0.5), Verdict::Clean);
    }

    #[test]
    fn residual_mean_matches_degrees_of_freedom() {
        let case = GridCase::ieee14();
        let x = base_state(&case);
        let z0 = h_measure(&case, &x);
        let cfg = WlsConfig::for_case(&case);
        let noise = Normal::new(0.0, DEFAULT_SIGMA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let trials = 500;
        let mut total = 0.0;
        for _ in 0..trials {
            let z: Vec<f64> = z0.iter().map(|v| v + noise.sample(&mut rng)).collect();
            total += wls_estimate(&case, &z, &cfg).unwrap().j_raw;
        }
        let mean = total / trials as f64;
        let dof = (case.n_meters() - estimated_columns(&case).len()) as f64;
        assert!((mean - dof).abs() < 0.15 * dof, "mean J {mean} vs dof {dof}");
    }

    #[test]
    fn gross_error_is_detected() {
        let case = GridCase::toy3();
        let x = solve_ac_power_flow(&case, &[0.0, 0.5, 0.3], &[0.0, 0.2, 0.1])
            .unwrap()
            .state;
        let mut z = h_measure(&case, &x);
        z[1] += 1.0;
        let res = wls_estimate(&case, &z, &WlsConfig::for_case(&case)).unwrap();
        assert!(res.j > 0.5, "J = {}", res.j);
        assert_eq!(res.verdict(0.5), Verdict::BadData);
    }

    #[test]
    fn threshold_is_strict() {
        assert_eq!(bdd_check(0.0, 0.5), Verdict::Clean);
        assert_eq!(bdd_check(0.5, 0.5), Verdict::BadData);
    }

    #[test]
    fn uniform_weight_scaling_leaves_estimate_unchanged() {
        let case = GridCase::ieee14();
        let x = base_state(&case);
        let noise = Normal::new(0.0, DEFAULT_SIGMA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let z: Vec<f64> = h_measure(&case, &x)
            .iter()
            .map(|v| v + noise.sample(&mut rng))
            .collect();
        let a = wls_estimate(&case, &z, &WlsConfig::for_case(&case)).unwrap();
        let mut cfg = WlsConfig::for_case(&case);
        cfg.norm = ResidualNorm::uniform(case.n_meters(), 3.7 * DEFAULT_SIGMA);
        let b = wls_estimate(&case, &z, &cfg).unwrap();
        assert!(a.x_hat.max_abs_diff(&b.x_hat) < 1e-9);
    }

    #[test]
    fn converged_residual_not_above_flat_start() {
        let case = GridCase::ieee14();
        let x = base_state(&case);
        let noise = Normal::new(0.0, DEFAULT_SIGMA).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cfg = WlsConfig::for_case(&case);
        for _ in 0..20 {
            let z: Vec<f64> = h_measure(&case, &x)
                .iter()
                .map(|v| v + noise.sample(&mut rng))
                .collect();
            let res = wls_estimate(&case, &z, &cfg).unwrap();
            let flat = cfg.norm.objective(&z, &h_measure(&case, &StateVector::flat(14)));
            assert!(res.j <= flat);
        }
    }

    #[test]
    fn too_few_meters_is_unobservable() {
        let case = GridCase::toy3();
        let mut cfg = WlsConfig::for_case(&case);
        cfg.norm.weights = vec![1e4; 6];
        // Zero weights on all Q meters leave the magnitudes unobservable.
        for w in &mut cfg.norm.weights[3..] {
            *w = 0.0;
        }
        let err = wls_estimate(&case, &[0.0; 6], &cfg).unwrap_err();
        assert!(matches!(err, Error::Unobservable(_)), "{err}");
    }

    #[test]
    fn dc_estimate_cases() {
        let bundle = build_matrices(&GridCase::toy3()).unwrap();
        assert_eq!(dc_estimate(&bundle, &[0.0; 3]).unwrap(), vec![0.0; 3]);
        let theta = dc_estimate(&bundle, &[-1.0, 2.0, -1.0]).unwrap();
        for (a, e) in theta.iter().zip([0.0, 0.1, 0.0]) {
            assert!((a - e).abs() < 1e-12, "{theta:?}");
        }
        assert!(dc_estimate(&bundle, &[1.0]).is_err());
    }

    #[test]
    fn dc_estimate_recovers_range_space_angles() {
        let case = GridCase::ieee14();
        let bundle = build_matrices(&case).unwrap();
        let x = base_state(&case);
        let p: Vec<f64> = bundle.dc_injections(&x.theta).iter().copied().collect();
        let theta = dc_estimate(&bundle, &p).unwrap();
        for (a, e) in theta.iter().zip(&x.theta) {
            assert!((a - e).abs() < 1e-10);
        }
    }
}
