//! Network case loading, validation and the topology-derived matrices.
//!
//! Sign conventions: branch flow is positive from `from` to `to`, the
//! incidence matrix `M` carries `+1` at the from-bus and `-1` at the to-bus,
//! and `B = M Y Mᵀ` (positive diagonal).

use std::collections::{HashMap, HashSet, VecDeque};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const IEEE14_JSON: &str = include_str!("../fixtures/ieee14.json");
const TOY3_JSON: &str = include_str!("../fixtures/toy3.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bus {
    pub id: u32,
    pub is_reference: bool,
    /// Active demand, per-unit.
    pub p_load: f64,
    /// Reactive demand, per-unit.
    pub q_load: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub id: u32,
    pub from: u32,
    pub to: u32,
    /// Series susceptance, per-unit.
    pub b: f64,
    /// Thermal flow limit, per-unit.
    pub f_limit: f64,
}

/// A validated network case. Construct through [`GridCase::from_json`],
/// [`load_case`] or [`GridCase::new`]; all three run the same checks.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCase {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    pub branches: Vec<Branch>,
    #[serde(skip)]
    index: HashMap<u32, usize>,
    #[serde(skip)]
    reference: usize,
}

#[derive(Deserialize)]
struct RawCase {
    base_mva: f64,
    buses: Vec<Bus>,
    branches: Vec<Branch>,
}

/// Reads and validates a case file.
pub fn load_case(path: impl AsRef<Path>) -> Result<GridCase> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    GridCase::from_json(&text)
}

impl GridCase {
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: RawCase = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Self::new(raw.base_mva, raw.buses, raw.branches)
    }

    /// The bundled IEEE 14-bus fixture.
    pub fn ieee14() -> Self {
        Self::from_json(IEEE14_JSON).expect("bundled 14-bus fixture is valid")
    }

    /// Three buses in a triangle, every branch b = 10.
    pub fn toy3() -> Self {
        Self::from_json(TOY3_JSON).expect("bundled 3-bus fixture is valid")
    }

    pub fn new(base_mva: f64, buses: Vec<Bus>, branches: Vec<Branch>) -> Result<Self> {
        if !(base_mva.is_finite() && base_mva > 0.0) {
            return Err(Error::InvalidCase(format!("base_mva must be positive, got {base_mva}")));
        }
        if buses.len() < 2 {
            return Err(Error::InvalidCase("case needs at least two buses".into()));
        }

        let mut index = HashMap::with_capacity(buses.len());
        for (k, bus) in buses.iter().enumerate() {
            if index.insert(bus.id, k).is_some() {
                return Err(Error::InvalidCase(format!("duplicate bus id {}", bus.id)));
            }
            if !(bus.p_load.is_finite() && bus.q_load.is_finite()) {
                return Err(Error::InvalidCase(format!("bus {}: non-finite load", bus.id)));
            }
        }

        let refs: Vec<u32> = buses.iter().filter(|b| b.is_reference).map(|b| b.id).collect();
        let reference = match refs.as_slice() {
            [] => return Err(Error::InvalidCase("no reference bus".into())),
            [id] => index[id],
            _ => {
                return Err(Error::InvalidCase(format!(
                    "multiple reference buses: {refs:?}"
                )))
            }
        };

        let mut branch_ids = HashSet::new();
        for br in &branches {
            if !branch_ids.insert(br.id) {
                return Err(Error::InvalidCase(format!("duplicate branch id {}", br.id)));
            }
            for end in [br.from, br.to] {
                if !index.contains_key(&end) {
                    return Err(Error::InvalidCase(format!(
                        "branch {}: dangling bus {end}",
                        br.id
                    )));
                }
            }
            if br.from == br.to {
                return Err(Error::InvalidCase(format!("branch {}: self loop", br.id)));
            }
            if !(br.b.is_finite() && br.b > 0.0) {
                return Err(Error::InvalidCase(format!(
                    "branch {}: susceptance must be positive, got {}",
                    br.id, br.b
                )));
            }
            if !(br.f_limit > 0.0) {
                return Err(Error::InvalidCase(format!(
                    "branch {}: flow limit must be positive, got {}",
                    br.id, br.f_limit
                )));
            }
        }

        let case = GridCase {
            base_mva,
            buses,
            branches,
            index,
            reference,
        };
        if let Some(bus) = case.unreachable_bus(&[]) {
            return Err(Error::InvalidCase(format!(
                "disconnected graph: bus {} is not reachable from the reference",
                case.buses[bus].id
            )));
        }
        Ok(case)
    }

    pub fn n_buses(&self) -> usize {
        self.buses.len()
    }

    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Meter count under the all-bus P-then-Q injection convention.
    pub fn n_meters(&self) -> usize {
        2 * self.buses.len()
    }

    /// Index of the reference bus.
    pub fn reference(&self) -> usize {
        self.reference
    }

    /// Bus indices other than the reference, ascending.
    pub fn non_reference(&self) -> Vec<usize> {
        (0..self.n_buses()).filter(|&i| i != self.reference).collect()
    }

    pub fn bus_index(&self, id: u32) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Zero-based (from, to) bus indices per branch.
    pub fn branch_ends(&self) -> Vec<(usize, usize)> {
        self.branches
            .iter()
            .map(|br| (self.index[&br.from], self.index[&br.to]))
            .collect()
    }

    pub fn limits(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.f_limit).collect()
    }

    pub fn p_loads(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.p_load).collect()
    }

    pub fn q_loads(&self) -> Vec<f64> {
        self.buses.iter().map(|b| b.q_load).collect()
    }

    /// Same network with every flow limit replaced.
    pub fn with_limits(&self, limits: &[f64]) -> Result<Self> {
        if limits.len() != self.n_branches() {
            return Err(Error::Shape(format!(
                "{} limits for {} branches",
                limits.len(),
                self.n_branches()
            )));
        }
        let mut branches = self.branches.clone();
        for (br, &l) in branches.iter_mut().zip(limits) {
            br.f_limit = l;
        }
        Self::new(self.base_mva, self.buses.clone(), branches)
    }

    /// First bus (by index) not reachable from the reference once the
    /// branches at positions `removed` are taken out of service.
    pub fn unreachable_bus(&self, removed: &[usize]) -> Option<usize> {
        let n = self.n_buses();
        let mut adj = vec![Vec::new(); n];
        for (k, (f, t)) in self.branch_ends_iter().enumerate() {
            if removed.contains(&k) {
                continue;
            }
            adj[f].push(t);
            adj[t].push(f);
        }
        let mut seen = vec![false; n];
        let mut queue = VecDeque::from([self.reference]);
        seen[self.reference] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        seen.iter().position(|s| !s)
    }

    fn branch_ends_iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.branches
            .iter()
            .map(|br| (self.index[&br.from], self.index[&br.to]))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("case serializes")
    }
}

/// Topology-derived matrices shared by every estimator and screener.
#[derive(Debug, Clone)]
pub struct MatrixBundle {
    /// Nodal susceptance matrix, n×n.
    pub b: DMatrix<f64>,
    /// `b` with the reference row and column removed.
    pub b_red: DMatrix<f64>,
    pub b_red_inv: DMatrix<f64>,
    /// Branch-bus incidence, n×L.
    pub m: DMatrix<f64>,
    /// Diagonal branch susceptances, L×L.
    pub y: DMatrix<f64>,
    /// DC measurement Jacobian over the non-reference angles, n×(n−1).
    pub h_dc: DMatrix<f64>,
    /// Least-squares left inverse `(HᵀH)⁻¹Hᵀ`, (n−1)×n.
    pub h_dc_pinv: DMatrix<f64>,
    pub reference: usize,
    pub non_reference: Vec<usize>,
    pub branch_ends: Vec<(usize, usize)>,
    pub limits: Vec<f64>,
}

pub fn build_matrices(case: &GridCase) -> Result<MatrixBundle> {
    let n = case.n_buses();
    let l = case.n_branches();
    let ends = case.branch_ends();

    let mut m = DMatrix::zeros(n, l);
    let mut y = DMatrix::zeros(l, l);
    for (k, (&(f, t), br)) in ends.iter().zip(&case.branches).enumerate() {
        m[(f, k)] = 1.0;
        m[(t, k)] = -1.0;
        y[(k, k)] = br.b;
    }
    let b = &m * &y * m.transpose();

    let non_reference = case.non_reference();
    let b_red = b.select_rows(&non_reference).select_columns(&non_reference);
    let b_red_inv = b_red.clone().try_inverse().ok_or(Error::Islanded)?;
    let cond = b_red.norm() * b_red_inv.norm();
    if !cond.is_finite() || cond > 1e14 {
        return Err(Error::Islanded);
    }

    let h_dc = b.select_columns(&non_reference);
    let gram = h_dc.transpose() * &h_dc;
    let chol = gram
        .cholesky()
        .ok_or_else(|| Error::Unobservable("DC Jacobian is rank deficient".into()))?;
    let h_dc_pinv = chol.solve(&h_dc.transpose());

    Ok(MatrixBundle {
        b,
        b_red,
        b_red_inv,
        m,
        y,
        h_dc,
        h_dc_pinv,
        reference: case.reference(),
        non_reference,
        branch_ends: ends,
        limits: case.limits(),
    })
}

impl MatrixBundle {
    pub fn n_buses(&self) -> usize {
        self.b.nrows()
    }

    pub fn n_branches(&self) -> usize {
        self.y.nrows()
    }

    /// Drops the reference angle.
    pub fn reduce(&self, theta: &[f64]) -> DVector<f64> {
        DVector::from_iterator(
            self.non_reference.len(),
            self.non_reference.iter().map(|&i| theta[i]),
        )
    }

    /// Inserts a zero reference angle.
    pub fn expand(&self, theta_red: &DVector<f64>) -> Vec<f64> {
        let mut theta = vec![0.0; self.n_buses()];
        for (k, &i) in self.non_reference.iter().enumerate() {
            theta[i] = theta_red[k];
        }
        theta
    }

    /// Nodal injections `P = H θ_red` under the DC model.
    pub fn dc_injections(&self, theta: &[f64]) -> DVector<f64> {
        &self.h_dc * self.reduce(theta)
    }
}
