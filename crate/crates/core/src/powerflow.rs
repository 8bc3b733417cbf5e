//! AC measurement function, Newton power flow and DC branch flows.
//!
//! Branches are modelled as lossless series susceptances (no resistance,
//! no charging, no taps), so the injection equations reduce to
//!
//! ```text
//! P_i = V_i Σ_j b_ij V_j sin(θ_i − θ_j)
//! Q_i = Σ_j b_ij (V_i² − V_i V_j cos(θ_i − θ_j))
//! ```
//!
//! Meters are the P injections at every bus followed by the Q injections at
//! every bus, so a case with `n` buses has `m = 2n` measurements.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{GridCase, MatrixBundle};

/// Bus voltage angles (rad) and magnitudes (per-unit).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub theta: Vec<f64>,
    pub v: Vec<f64>,
}

impl StateVector {
    pub fn flat(n: usize) -> Self {
        Self {
            theta: vec![0.0; n],
            v: vec![1.0; n],
        }
    }

    pub fn n_buses(&self) -> usize {
        self.theta.len()
    }

    /// `[θ; V]` as one vector of length 2n.
    pub fn concat(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.v).copied().collect()
    }

    pub fn max_abs_diff(&self, other: &StateVector) -> f64 {
        self.concat()
            .iter()
            .zip(other.concat())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Checks the reference angle is exactly zero, magnitudes positive and
    /// angles inside (−π, π).
    pub fn is_valid(&self, reference: usize) -> bool {
        self.theta.len() == self.v.len()
            && self.theta[reference] == 0.0
            && self.v.iter().all(|&v| v > 0.0 && v.is_finite())
            && self.theta.iter().all(|t| t.abs() < std::f64::consts::PI)
    }
}

/// Signed branch flows, from-bus to to-bus, per-unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowVector(pub Vec<f64>);

impl FlowVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Noise-free measurements `[P_1..P_n, Q_1..Q_n]`.
pub fn h_measure(case: &GridCase, x: &StateVector) -> Vec<f64> {
    let n = case.n_buses();
    let mut z = vec![0.0; 2 * n];
    for (br, (i, j)) in case.branches.iter().zip(case.branch_ends()) {
        let (vi, vj) = (x.v[i], x.v[j]);
        let d = x.theta[i] - x.theta[j];
        let (s, c) = d.sin_cos();
        let p = br.b * vi * vj * s;
        z[i] += p;
        z[j] -= p;
        z[n + i] += br.b * (vi * vi - vi * vj * c);
        z[n + j] += br.b * (vj * vj - vi * vj * c);
    }
    z
}

/// Jacobian of [`h_measure`], 2n × 2n, columns ordered `[θ_1..θ_n, V_1..V_n]`.
pub fn measurement_jacobian(case: &GridCase, x: &StateVector) -> DMatrix<f64> {
    let n = case.n_buses();
    let mut jac = DMatrix::zeros(2 * n, 2 * n);
    for (br, (i, j)) in case.branches.iter().zip(case.branch_ends()) {
        let b = br.b;
        let (vi, vj) = (x.v[i], x.v[j]);
        let d = x.theta[i] - x.theta[j];
        let (s, c) = d.sin_cos();

        // P_i += b vi vj sin(d), P_j -= the same.
        let dp_dd = b * vi * vj * c;
        jac[(i, i)] += dp_dd;
        jac[(i, j)] -= dp_dd;
        jac[(j, i)] -= dp_dd;
        jac[(j, j)] += dp_dd;
        jac[(i, n + i)] += b * vj * s;
        jac[(i, n + j)] += b * vi * s;
        jac[(j, n + i)] -= b * vj * s;
        jac[(j, n + j)] -= b * vi * s;

        // Q_i += b (vi² − vi vj cos d), Q_j += b (vj² − vi vj cos d).
        let dq_dd = b * vi * vj * s;
        jac[(n + i, i)] += dq_dd;
        jac[(n + i, j)] -= dq_dd;
        jac[(n + j, i)] += dq_dd;
        jac[(n + j, j)] -= dq_dd;
        jac[(n + i, n + i)] += b * (2.0 * vi - vj * c);
        jac[(n + i, n + j)] -= b * vi * c;
        jac[(n + j, n + j)] += b * (2.0 * vj - vi * c);
        jac[(n + j, n + i)] -= b * vj * c;
    }
    jac
}

#[derive(Debug, Clone, Copy)]
pub struct PowerFlowOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for PowerFlowOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iter: 50,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PowerFlowSolution {
    pub state: StateVector,
    pub iterations: usize,
    pub mismatch: f64,
}

/// Newton power flow from a flat start. The reference bus is the slack
/// (θ = 0, V = 1); every other bus is PQ with the given demand.
pub fn solve_ac_power_flow(
    case: &GridCase,
    p_load: &[f64],
    q_load: &[f64],
) -> Result<PowerFlowSolution> {
    solve_ac_power_flow_with(case, p_load, q_load, PowerFlowOptions::default())
}

pub fn solve_ac_power_flow_with(
    case: &GridCase,
    p_load: &[f64],
    q_load: &[f64],
    opts: PowerFlowOptions,
) -> Result<PowerFlowSolution> {
    let n = case.n_buses();
    if p_load.len() != n || q_load.len() != n {
        return Err(Error::Shape(format!("loads must have length {n}")));
    }
    let pq = case.non_reference();
    let k = pq.len();
    // Unknown columns: θ at PQ buses, then V at PQ buses.
    let cols: Vec<usize> = pq.iter().copied().chain(pq.iter().map(|&i| n + i)).collect();
    let rows = cols.clone();

    let mismatch_of = |x: &StateVector| -> DVector<f64> {
        let h = h_measure(case, x);
        DVector::from_iterator(
            2 * k,
            pq.iter()
                .map(|&i| h[i] + p_load[i])
                .chain(pq.iter().map(|&i| h[n + i] + q_load[i])),
        )
    };

    let mut x = StateVector::flat(n);
    let mut f = mismatch_of(&x);
    let mut norm = f.amax();
    let mut iterations = 0;

    while norm >= opts.tol {
        if iterations == opts.max_iter {
            return Err(Error::Diverged {
                iterations,
                mismatch: norm,
            });
        }
        iterations += 1;

        let jac = measurement_jacobian(case, &x)
            .select_rows(&rows)
            .select_columns(&cols);
        let step = jac.lu().solve(&(-&f)).ok_or(Error::Diverged {
            iterations,
            mismatch: norm,
        })?;

        // Full Newton step; halve while the mismatch grows.
        let mut alpha = 1.0;
        loop {
            let mut trial = x.clone();
            for (c, &i) in pq.iter().enumerate() {
                trial.theta[i] += alpha * step[c];
                trial.v[i] += alpha * step[k + c];
            }
            let f_trial = mismatch_of(&trial);
            let norm_trial = f_trial.amax();
            if norm_trial.is_finite() && (norm_trial < norm || alpha < 1e-3) {
                x = trial;
                f = f_trial;
                norm = norm_trial;
                break;
            }
            alpha *= 0.5;
        }
        if !norm.is_finite() || x.v.iter().any(|&v| v <= 0.0) {
            return Err(Error::Diverged {
                iterations,
                mismatch: norm,
            });
        }
    }

    Ok(PowerFlowSolution {
        state: x,
        iterations,
        mismatch: norm,
    })
}

/// `f = Y Mᵀ θ`.
pub fn dc_line_flows(bundle: &MatrixBundle, theta: &[f64]) -> FlowVector {
    FlowVector(
        bundle
            .branch_ends
            .iter()
            .enumerate()
            .map(|(k, &(i, j))| bundle.y[(k, k)] * (theta[i] - theta[j]))
            .collect(),
    )
}
