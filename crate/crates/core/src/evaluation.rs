//! Accuracy metrics, contingency-count errors and attack-campaign scoring.
//!
//! MAPE is pooled over every (epoch, state) pair rather than averaged per
//! epoch. Entries whose reference magnitude is below [`MAPE_FLOOR`] (the
//! reference angle, in practice) are excluded and counted.

use crate::contingency::Screener;
use crate::error::{Error, Result};
use crate::fdia::{AttackResult, AttackStatus};
use crate::grid_model::MatrixBundle;
use crate::powerflow::{dc_line_flows, StateVector};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;

pub const MAPE_FLOOR: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    /// Fraction, not percent.
    pub value: f64,
    pub included: usize,
    pub excluded: usize,
}

#[derive(Default)]
struct MapeSum {
    sum: f64,
    included: usize,
    excluded: usize,
}

impl MapeSum {
    fn add(&mut self, x: &[f64], y: &[f64]) {
        for (a, b) in x.iter().zip(y) {
            if a.abs() < MAPE_FLOOR {
                self.excluded += 1;
            } else {
                self.sum += ((b - a) / a).abs();
                self.included += 1;
            }
        }
    }

    fn finish(self, what: &str) -> Result<Mape> {
        if self.included == 0 {
            return Err(Error::UndefinedMetric(format!("{what}: every reference entry is zero")));
        }
        if self.excluded > 0 {
            log::debug!("{what}: {} near-zero entries excluded", self.excluded);
        }
        Ok(Mape {
            value: self.sum / self.included as f64,
            included: self.included,
            excluded: self.excluded,
        })
    }
}

/// `mean |(yᵢ − xᵢ)/xᵢ|` with `x` the reference.
pub fn mape(x: &[f64], y: &[f64]) -> Result<Mape> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!("mape over {} and {} entries", x.len(), y.len())));
    }
    let mut s = MapeSum::default();
    s.add(x, y);
    s.finish("mape")
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StateMape {
    pub theta: Mape,
    pub v: Mape,
    pub total: Mape,
}

/// Pooled MAPE of `estimate` against `reference`, per state kind and jointly.
pub fn state_mape(reference: &[StateVector], estimate: &[StateVector]) -> Result<StateMape> {
    if reference.len() != estimate.len() {
        return Err(Error::RangeMismatch(format!(
            "{} reference epochs vs {} estimates",
            reference.len(),
            estimate.len()
        )));
    }
    let (mut th, mut v, mut all) = (MapeSum::default(), MapeSum::default(), MapeSum::default());
    for (x, y) in reference.iter().zip(estimate) {
        if x.n_buses() != y.n_buses() {
            return Err(Error::Shape("state vectors of different size".into()));
        }
        th.add(&x.theta, &y.theta);
        v.add(&x.v, &y.v);
        all.add(&x.theta, &y.theta);
        all.add(&x.v, &y.v);
    }
    Ok(StateMape {
        theta: th.finish("mape theta")?,
        v: v.finish("mape V")?,
        total: all.finish("mape total")?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochCounts {
    pub epoch: usize,
    pub n1: usize,
    pub n2: usize,
}

/// N-1 and N-2 violation counts implied by each estimate's DC line flows.
pub fn estimate_counts(
    bundle: &MatrixBundle,
    screener: &Screener,
    epochs: &[usize],
    estimates: &[StateVector],
) -> Vec<EpochCounts> {
    epochs
        .iter()
        .zip(estimates)
        .map(|(&epoch, x)| {
            let flows = dc_line_flows(bundle, &x.theta).0;
            let (n1, n2) = screener.counts(&flows, &bundle.limits);
            EpochCounts { epoch, n1, n2 }
        })
        .collect()
}

/// Per-epoch `(|N̂₁ − N₁|, |N̂₂ − N₂|)`.
pub fn contingency_errors(estimated: &[EpochCounts], truth: &[EpochCounts]) -> Result<Vec<(usize, usize)>> {
    if estimated.len() != truth.len() || estimated.iter().zip(truth).any(|(a, b)| a.epoch != b.epoch) {
        return Err(Error::RangeMismatch(
            "estimated and true contingency counts cover different epochs".into(),
        ));
    }
    Ok(estimated
        .iter()
        .zip(truth)
        .map(|(a, b)| (a.n1.abs_diff(b.n1), a.n2.abs_diff(b.n2)))
        .collect())
}

fn mean(v: &[usize]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<usize>() as f64 / v.len() as f64
}

fn fraction(v: &[usize], pred: impl Fn(usize) -> bool) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().filter(|&&e| pred(e)).count() as f64 / v.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CleanMetrics {
    pub epochs: usize,
    pub mape: StateMape,
    pub eps1_mean: f64,
    pub eps2_mean: f64,
    pub eps1_zero_fraction: f64,
    pub eps2_zero_fraction: f64,
    #[serde(skip)]
    pub eps1: Vec<usize>,
    #[serde(skip)]
    pub eps2: Vec<usize>,
}

/// Attack-free accuracy of one estimator over a set of epochs.
pub fn score_clean(
    truth: &[StateVector],
    estimates: &[StateVector],
    counts_true: &[EpochCounts],
    counts_est: &[EpochCounts],
) -> Result<CleanMetrics> {
    let mape = state_mape(truth, estimates)?;
    let errs = contingency_errors(counts_est, counts_true)?;
    let eps1: Vec<usize> = errs.iter().map(|e| e.0).collect();
    let eps2: Vec<usize> = errs.iter().map(|e| e.1).collect();
    Ok(CleanMetrics {
        epochs: truth.len(),
        mape,
        eps1_mean: mean(&eps1),
        eps2_mean: mean(&eps2),
        eps1_zero_fraction: fraction(&eps1, |e| e == 0),
        eps2_zero_fraction: fraction(&eps2, |e| e == 0),
        eps1,
        eps2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackMetrics {
    /// Epochs with a synthesized attack; the rest were skipped.
    pub attacked: usize,
    pub skipped: usize,
    /// Attacked estimates against the unattacked ones.
    pub mape: StateMape,
    pub eps1_mean: f64,
    pub eps2_mean: f64,
    pub eps2_zero_fraction: f64,
    pub eps2_below5_fraction: f64,
    pub eps1_nonzero_fraction: f64,
    /// Either count moved.
    pub success_fraction: f64,
    pub stealthy_fraction: f64,
    /// Mean |a| over targeted meters, in attack units.
    pub mean_abs_injection: f64,
    #[serde(skip)]
    pub eps1: Vec<usize>,
    #[serde(skip)]
    pub eps2: Vec<usize>,
}

/// Scores a campaign. Every epoch in `epochs` must have a result; results
/// that were skipped are counted but not scored.
pub fn score_attack_campaign(
    results: &[AttackResult],
    epochs: &[usize],
    support: &[usize],
    unit_scale: f64,
) -> Result<AttackMetrics> {
    let by_epoch: BTreeMap<usize, &AttackResult> = results.iter().map(|r| (r.epoch, r)).collect();
    if let Some(missing) = epochs.iter().find(|e| !by_epoch.contains_key(e)) {
        return Err(Error::RangeMismatch(format!("campaign has no result for epoch {missing}")));
    }
    let scored: Vec<&AttackResult> = epochs
        .iter()
        .map(|e| by_epoch[e])
        .filter(|r| r.status == AttackStatus::Attacked)
        .collect();
    if scored.is_empty() {
        return Err(Error::UndefinedMetric("no epoch was attacked".into()));
    }
    let clean: Vec<StateVector> = scored.iter().map(|r| r.x_clean.clone().expect("attacked")).collect();
    let attacked: Vec<StateVector> = scored.iter().map(|r| r.x_attacked().expect("attacked")).collect();
    let eps1: Vec<usize> = scored.iter().map(|r| r.n1_attacked.abs_diff(r.n1_clean)).collect();
    let eps2: Vec<usize> = scored.iter().map(|r| r.n2_attacked.abs_diff(r.n2_clean)).collect();
    let k = scored.len() as f64;
    Ok(AttackMetrics {
        attacked: scored.len(),
        skipped: epochs.len() - scored.len(),
        mape: state_mape(&clean, &attacked)?,
        eps1_mean: mean(&eps1),
        eps2_mean: mean(&eps2),
        eps2_zero_fraction: fraction(&eps2, |e| e == 0),
        eps2_below5_fraction: fraction(&eps2, |e| e < 5),
        eps1_nonzero_fraction: fraction(&eps1, |e| e != 0),
        success_fraction: eps1.iter().zip(&eps2).filter(|(a, b)| **a != 0 || **b != 0).count() as f64 / k,
        stealthy_fraction: scored.iter().filter(|r| r.stealthy).count() as f64 / k,
        mean_abs_injection: scored.iter().map(|r| r.mean_abs_injection(support)).sum::<f64>() / k * unit_scale,
        eps1,
        eps2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub model: String,
    pub clean: CleanMetrics,
    pub attack: Option<AttackMetrics>,
}

const CLEAN_COLUMNS: [&str; 8] = [
    "mape_v",
    "mape_theta",
    "mape_total",
    "eps1",
    "eps2",
    "frac_eps1_zero",
    "frac_eps2_zero",
    "epochs",
];

const ATTACK_COLUMNS: [&str; 13] = [
    "mape_v_a",
    "mape_theta_a",
    "mape_total_a",
    "eps1_a",
    "eps2_a",
    "frac_eps2_a_zero",
    "frac_eps2_a_below5",
    "frac_eps1_a_nonzero",
    "frac_success",
    "frac_stealthy",
    "mean_abs_a",
    "attacked",
    "skipped",
];

/// Fixed-precision rendering so tables compare byte-for-byte.
fn cell(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.6}")
    } else {
        String::new()
    }
}

/// One row per model. MAPE columns are in percent. Attack columns are
/// present only if some row carries attack metrics.
pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let with_attack = rows.iter().any(|r| r.attack.is_some());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["model"];
    header.extend(CLEAN_COLUMNS);
    if with_attack {
        header.extend(ATTACK_COLUMNS);
    }
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let c = &r.clean;
        let mut rec = vec![
            r.model.clone(),
            cell(100.0 * c.mape.v.value),
            cell(100.0 * c.mape.theta.value),
            cell(100.0 * c.mape.total.value),
            cell(c.eps1_mean),
            cell(c.eps2_mean),
            cell(c.eps1_zero_fraction),
            cell(c.eps2_zero_fraction),
            c.epochs.to_string(),
        ];
        if with_attack {
            match &r.attack {
                Some(a) => rec.extend([
                    cell(100.0 * a.mape.v.value),
                    cell(100.0 * a.mape.theta.value),
                    cell(100.0 * a.mape.total.value),
                    cell(a.eps1_mean),
                    cell(a.eps2_mean),
                    cell(a.eps2_zero_fraction),
                    cell(a.eps2_below5_fraction),
                    cell(a.eps1_nonzero_fraction),
                    cell(a.success_fraction),
                    cell(a.stealthy_fraction),
                    cell(a.mean_abs_injection),
                    a.attacked.to_string(),
                    a.skipped.to_string(),
                ]),
                None => rec.extend(std::iter::repeat_n(String::new(), ATTACK_COLUMNS.len())),
            }
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("<metrics>", e))
}

pub fn write_metrics_json<W: Write>(rows: &[MetricRow], mut out: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut out, rows).map_err(|e| Error::Parse(e.to_string()))?;
    writeln!(out).map_err(|e| Error::io("<metrics>", e))
}

/// `(value, count)` for every distinct value, ascending.
pub fn histogram(values: &[usize]) -> Vec<(usize, usize)> {
    let mut h = BTreeMap::new();
    for &v in values {
        *h.entry(v).or_insert(0usize) += 1;
    }
    h.into_iter().collect()
}

/// Mean recovered from histogram bins.
pub fn histogram_mean(bins: &[(usize, usize)]) -> f64 {
    let total: usize = bins.iter().map(|b| b.1).sum();
    bins.iter().map(|(v, c)| v * c).sum::<usize>() as f64 / total as f64
}

/// Long-format histogram table: `model,metric,value,count,fraction`.
pub fn write_histograms_csv<W: Write>(rows: &[MetricRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Parse(e.to_string());
    w.write_record(["model", "metric", "value", "count", "fraction"]).map_err(csv_err)?;
    for r in rows {
        let mut series = vec![("eps1", &r.clean.eps1), ("eps2", &r.clean.eps2)];
        if let Some(a) = &r.attack {
            series.push(("eps1_a", &a.eps1));
            series.push(("eps2_a", &a.eps2));
        }
        for (name, values) in series {
            let total = values.len() as f64;
            for (v, c) in histogram(values) {
                w.write_record([
                    r.model.clone(),
                    name.to_string(),
                    v.to_string(),
                    c.to_string(),
                    cell(c as f64 / total),
                ])
                .map_err(csv_err)?;
            }
        }
    }
    w.flush().map_err(|e| Error::io("<histograms>", e))
}
