//! N-1 and N-2 screening with line outage distribution factors.
//!
//! `ψ[i][j]` is the PTDF of line `i` for a unit transfer from the from-bus to
//! the to-bus of line `j`. Single outages use `λ_ij = ψ_ij / (1 − ψ_jj)`;
//! double outages solve the 2×2 system for the flows the outaged pair would
//! have to carry and superpose them. Where that system is singular the
//! screener re-solves the DC network with the lines removed.

use std::collections::VecDeque;
use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::MatrixBundle;
use crate::powerflow::FlowVector;

const ISLANDING_EPS: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct LodfTable {
    /// `lodf[(i, j)]`: share of outaged line `j`'s flow that lands on line `i`.
    /// Islanding columns hold NaN.
    pub lodf: DMatrix<f64>,
    /// `true` where removing the line alone islands the network.
    pub islanding: Vec<bool>,
    /// Transfer PTDFs `ψ`, L×L.
    pub psi: DMatrix<f64>,
}

pub fn compute_lodf(bundle: &MatrixBundle) -> LodfTable {
    let n = bundle.n_buses();
    let l = bundle.n_branches();
    // Angle sensitivity to injections, reference row/column zero.
    let mut x = DMatrix::zeros(n, n);
    for (a, &i) in bundle.non_reference.iter().enumerate() {
        for (b, &j) in bundle.non_reference.iter().enumerate() {
            x[(i, j)] = bundle.b_red_inv[(a, b)];
        }
    }
    let ptdf = &bundle.y * bundle.m.transpose() * x;
    let psi = &ptdf * &bundle.m;

    let mut lodf = DMatrix::from_element(l, l, f64::NAN);
    let mut islanding = vec![false; l];
    for j in 0..l {
        let denom = 1.0 - psi[(j, j)];
        if denom.abs() < ISLANDING_EPS {
            islanding[j] = true;
            continue;
        }
        for i in 0..l {
            lodf[(i, j)] = psi[(i, j)] / denom;
        }
        lodf[(j, j)] = -1.0;
    }
    LodfTable {
        lodf,
        islanding,
        psi,
    }
}

/// `f_i' = λ_ij f_j + f_i`.
pub fn post_outage_flow(f_i: f64, f_j: f64, lambda_ij: f64) -> f64 {
    lambda_ij * f_j + f_i
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationReason {
    Thermal,
    Islanding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    /// Branch ids taken out of service.
    pub outage: Vec<u32>,
    pub reason: ViolationReason,
    /// Overloaded branch id; `None` for islanding.
    pub line: Option<u32>,
    pub flow: f64,
    pub limit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContingencyReport {
    pub epoch: usize,
    pub n1_count: usize,
    pub n2_count: usize,
    pub violations: Vec<Violation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Order {
    N1,
    N2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScreenOptions {
    /// Count outage sets that island the network as contingencies.
    pub count_islanding: bool,
}

impl Default for ScreenOptions {
    fn default() -> Self {
        Self {
            count_islanding: true,
        }
    }
}

/// Post-outage flows for one outage set, or `None` if it islands the grid.
/// Outaged lines carry zero.
pub type OutageFlows = Option<Vec<f64>>;

/// Precomputed screening context for one network.
#[derive(Debug, Clone)]
pub struct Screener {
    table: LodfTable,
    bundle: MatrixBundle,
    branch_ids: Vec<u32>,
    pub options: ScreenOptions,
}

impl Screener {
    pub fn new(bundle: &MatrixBundle, branch_ids: Vec<u32>) -> Self {
        Self {
            table: compute_lodf(bundle),
            bundle: bundle.clone(),
            branch_ids,
            options: ScreenOptions::default(),
        }
    }

    pub fn with_options(mut self, options: ScreenOptions) -> Self {
        self.options = options;
        self
    }

    pub fn table(&self) -> &LodfTable {
        &self.table
    }

    pub fn n_branches(&self) -> usize {
        self.bundle.n_branches()
    }

    /// All unordered line pairs, lexicographic.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let l = self.n_branches();
        (0..l)
            .flat_map(|j| (j + 1..l).map(move |k| (j, k)))
            .collect()
    }

    pub fn single_outage(&self, flows: &[f64], j: usize) -> OutageFlows {
        if self.table.islanding[j] {
            return None;
        }
        let mut out: Vec<f64> = (0..flows.len())
            .map(|i| post_outage_flow(flows[i], flows[j], self.table.lodf[(i, j)]))
            .collect();
        out[j] = 0.0;
        Some(out)
    }

    pub fn double_outage(&self, flows: &[f64], j: usize, k: usize) -> OutageFlows {
        let psi = &self.table.psi;
        if self.table.islanding[j] || self.table.islanding[k] {
            return None;
        }
        let a = DMatrix::from_row_slice(
            2,
            2,
            &[
                1.0 - psi[(j, j)],
                -psi[(j, k)],
                -psi[(k, j)],
                1.0 - psi[(k, k)],
            ],
        );
        let det = a[(0, 0)] * a[(1, 1)] - a[(0, 1)] * a[(1, 0)];
        if det.abs() < ISLANDING_EPS {
            return resolve_outage(&self.bundle, flows, &[j, k]);
        }
        let transfer = a
            .lu()
            .solve(&DVector::from_column_slice(&[flows[j], flows[k]]))?;
        let mut out: Vec<f64> = (0..flows.len())
            .map(|i| flows[i] + psi[(i, j)] * transfer[0] + psi[(i, k)] * transfer[1])
            .collect();
        out[j] = 0.0;
        out[k] = 0.0;
        Some(out)
    }

    fn judge(
        &self,
        outage: &[usize],
        post: &OutageFlows,
        limits: &[f64],
        violations: &mut Vec<Violation>,
    ) -> bool {
        let ids: Vec<u32> = outage.iter().map(|&k| self.branch_ids[k]).collect();
        match post {
            None => {
                if self.options.count_islanding {
                    violations.push(Violation {
                        outage: ids,
                        reason: ViolationReason::Islanding,
                        line: None,
                        flow: f64::NAN,
                        limit: f64::NAN,
                    });
                }
                self.options.count_islanding
            }
            Some(f) => {
                let before = violations.len();
                for (i, (&fi, &lim)) in f.iter().zip(limits).enumerate() {
                    if !outage.contains(&i) && fi.abs() > lim {
                        violations.push(Violation {
                            outage: ids.clone(),
                            reason: ViolationReason::Thermal,
                            line: Some(self.branch_ids[i]),
                            flow: fi.abs(),
                            limit: lim,
                        });
                    }
                }
                violations.len() > before
            }
        }
    }

    /// Screens one order; the count for the other order is left at zero.
    pub fn screen(&self, flows: &FlowVector, limits: &[f64], order: Order) -> ContingencyReport {
        let mut report = ContingencyReport {
            epoch: 0,
            n1_count: 0,
            n2_count: 0,
            violations: Vec::new(),
        };
        let f = &flows.0;
        match order {
            Order::N1 => {
                for j in 0..self.n_branches() {
                    let post = self.single_outage(f, j);
                    if self.judge(&[j], &post, limits, &mut report.violations) {
                        report.n1_count += 1;
                    }
                }
            }
            Order::N2 => {
                for (j, k) in self.pairs() {
                    let post = self.double_outage(f, j, k);
                    if self.judge(&[j, k], &post, limits, &mut report.violations) {
                        report.n2_count += 1;
                    }
                }
            }
        }
        report
    }

    pub fn screen_all(&self, flows: &FlowVector, limits: &[f64]) -> ContingencyReport {
        let mut one = self.screen(flows, limits, Order::N1);
        let two = self.screen(flows, limits, Order::N2);
        one.n2_count = two.n2_count;
        one.violations.extend(two.violations);
        one
    }

    /// `(N₁, N₂)` without materializing the violation list.
    pub fn counts(&self, flows: &[f64], limits: &[f64]) -> (usize, usize) {
        let violates = |outage: &[usize], post: OutageFlows| match post {
            None => self.options.count_islanding,
            Some(f) => f
                .iter()
                .zip(limits)
                .enumerate()
                .any(|(i, (fi, lim))| !outage.contains(&i) && fi.abs() > *lim),
        };
        let n1 = (0..self.n_branches())
            .filter(|&j| violates(&[j], self.single_outage(flows, j)))
            .count();
        let n2 = self
            .pairs()
            .into_iter()
            .filter(|&(j, k)| violates(&[j, k], self.double_outage(flows, j, k)))
            .count();
        (n1, n2)
    }
}

/// Free-function form of [`Screener::screen`].
pub fn screen_contingencies(
    bundle: &MatrixBundle,
    branch_ids: Vec<u32>,
    flows: &FlowVector,
    limits: &[f64],
    order: Order,
) -> Result<ContingencyReport> {
    if flows.len() != bundle.n_branches() || limits.len() != bundle.n_branches() {
        return Err(Error::Shape("flows and limits must have one entry per branch".into()));
    }
    Ok(Screener::new(bundle, branch_ids).screen(flows, limits, order))
}

/// DC re-solve with the given branch positions removed, holding the nodal
/// injections implied by the pre-outage flows.
pub fn resolve_outage(bundle: &MatrixBundle, flows: &[f64], removed: &[usize]) -> OutageFlows {
    let n = bundle.n_buses();
    let injections = &bundle.m * DVector::from_column_slice(flows);

    let mut adj = vec![Vec::new(); n];
    let mut b = DMatrix::zeros(n, n);
    for (k, &(f, t)) in bundle.branch_ends.iter().enumerate() {
        if removed.contains(&k) {
            continue;
        }
        adj[f].push(t);
        adj[t].push(f);
        let y = bundle.y[(k, k)];
        b[(f, f)] += y;
        b[(t, t)] += y;
        b[(f, t)] -= y;
        b[(t, f)] -= y;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([bundle.reference]);
    seen[bundle.reference] = true;
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            if !seen[v] {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    if seen.iter().any(|s| !s) {
        return None;
    }

    let idx = &bundle.non_reference;
    let b_red = b.select_rows(idx).select_columns(idx);
    let p_red = DVector::from_iterator(idx.len(), idx.iter().map(|&i| injections[i]));
    let theta_red = b_red.lu().solve(&p_red)?;
    let theta = bundle.expand(&theta_red);
    Some(
        bundle
            .branch_ends
            .iter()
            .enumerate()
            .map(|(k, &(f, t))| {
                if removed.contains(&k) {
                    0.0
                } else {
                    bundle.y[(k, k)] * (theta[f] - theta[t])
                }
            })
            .collect(),
    )
}

/// One row per report: `epoch,N1,N2`.
pub fn write_counts_csv<W: Write>(reports: &[ContingencyReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["epoch", "N1", "N2"])
        .map_err(|e| Error::Parse(e.to_string()))?;
    for r in reports {
        w.write_record([
            r.epoch.to_string(),
            r.n1_count.to_string(),
            r.n2_count.to_string(),
        ])
        .map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io("csv", e))
}
