use crate::grid_model::{GridCase, MatrixBundle};
use crate::powerflow::{h_measure, measurement_jacobian, StateVector};
use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Static and dynamic physics losses and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub l_static: f64,
    pub l_dynamic: f64,
    pub gamma: f64,
    pub l_total: f64,
}

impl LossTerms {
    pub fn new(l_static: f64, l_dynamic: f64, gamma: f64) -> Self {
        Self {
            l_static,
            l_dynamic,
            gamma,
            l_total: l_static + gamma * l_dynamic,
        }
    }
}

/// Mean squared mismatch between `z` and `h(x̂)`.
pub fn static_loss(case: &GridCase, z: &[f64], x_hat: &StateVector) -> f64 {
    let hx = h_measure(case, x_hat);
    let m = z.len() as f64;
    z.iter().zip(&hx).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / m
}

/// Static loss and its gradient over the stacked state `[θ; V]` (all buses).
pub fn static_loss_grad(case: &GridCase, z: &[f64], x_hat: &StateVector) -> (f64, Vec<f64>) {
    let hx = h_measure(case, x_hat);
    let m = z.len() as f64;
    let r = DVector::from_iterator(z.len(), z.iter().zip(&hx).map(|(a, b)| a - b));
    let loss = r.norm_squared() / m;
    let jac = measurement_jacobian(case, x_hat);
    let g = jac.tr_mul(&r) * (-2.0 / m);
    (loss, g.as_slice().to_vec())
}

fn dynamic_residual(
    bundle: &MatrixBundle,
    p_t: &[f64],
    p_prev: &[f64],
    theta_hat: &[f64],
    theta_dc_prev: &[f64],
) -> DVector<f64> {
    let d: Vec<f64> = bundle
        .non_reference
        .iter()
        .map(|&i| theta_hat[i] - theta_dc_prev[i])
        .collect();
    let implied = &bundle.h_dc * DVector::from_vec(d);
    DVector::from_iterator(
        p_t.len(),
        p_t.iter().zip(p_prev).map(|(a, b)| a - b),
    ) - implied
}

/// Mean squared mismatch between the measured change in active injections and
/// the change implied by moving from the previous DC angles to `θ̂`.
pub fn dynamic_loss(
    bundle: &MatrixBundle,
    p_t: &[f64],
    p_prev: &[f64],
    theta_hat: &[f64],
    theta_dc_prev: &[f64],
) -> f64 {
    let r = dynamic_residual(bundle, p_t, p_prev, theta_hat, theta_dc_prev);
    r.norm_squared() / p_t.len() as f64
}

/// Dynamic loss and its gradient over all-bus `θ̂` (zero at the reference).
pub fn dynamic_loss_grad(
    bundle: &MatrixBundle,
    p_t: &[f64],
    p_prev: &[f64],
    theta_hat: &[f64],
    theta_dc_prev: &[f64],
) -> (f64, Vec<f64>) {
    let r = dynamic_residual(bundle, p_t, p_prev, theta_hat, theta_dc_prev);
    let n = p_t.len() as f64;
    let g_red = bundle.h_dc.tr_mul(&r) * (-2.0 / n);
    let mut g = vec![0.0; bundle.n_buses()];
    for (k, &i) in bundle.non_reference.iter().enumerate() {
        g[i] = g_red[k];
    }
    (r.norm_squared() / n, g)
}
