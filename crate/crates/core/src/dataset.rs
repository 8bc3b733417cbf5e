//! Synthetic multi-epoch corpus: zonal load profiles, AC ground truth,
//! noisy measurements, DC estimates and true contingency counts.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::classic_estimation::dc_estimate;
use crate::contingency::Screener;
use crate::error::{Error, Result};
use crate::grid_model::{GridCase, MatrixBundle};
use crate::powerflow::{dc_line_flows, h_measure, solve_ac_power_flow, StateVector};

/// Epochs per day at a 5-minute interval.
const EPOCHS_PER_DAY: f64 = 288.0;
const EPOCHS_PER_WEEK: f64 = 7.0 * EPOCHS_PER_DAY;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileConfig {
    pub epochs: usize,
    pub seed: u64,
    pub interval_minutes: u32,
    /// Bus ids fed by each zone; one zone per bus.
    pub zone_buses: Vec<u32>,
    /// Diurnal amplitude as a fraction of the zone base.
    pub diurnal_amplitude: f64,
    pub weekly_amplitude: f64,
    /// AR(1) coefficient of the multiplicative noise.
    pub ar_coefficient: f64,
    /// Stationary standard deviation of the AR(1) noise, fraction of base.
    pub noise_level: f64,
}

impl ProfileConfig {
    /// Zones mapped onto every non-reference bus with positive base demand.
    pub fn for_case(case: &GridCase, epochs: usize, seed: u64) -> Self {
        let zone_buses = case
            .buses
            .iter()
            .filter(|b| !b.is_reference && b.p_load > 0.0)
            .map(|b| b.id)
            .collect();
        Self {
            epochs,
            seed,
            interval_minutes: 5,
            zone_buses,
            diurnal_amplitude: 0.3,
            weekly_amplitude: 0.08,
            ar_coefficient: 0.9,
            noise_level: 0.05,
        }
    }
}

/// Per-zone active demand series in MW.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoadProfile {
    pub interval_minutes: u32,
    pub zone_buses: Vec<u32>,
    /// `series[zone][epoch]`, MW.
    pub series: Vec<Vec<f64>>,
}

impl LoadProfile {
    pub fn epochs(&self) -> usize {
        self.series.first().map_or(0, Vec::len)
    }

    pub fn duration_days(&self) -> f64 {
        self.epochs() as f64 * self.interval_minutes as f64 / (24.0 * 60.0)
    }
}

pub fn generate_profiles(case: &GridCase, cfg: &ProfileConfig) -> Result<LoadProfile> {
    if cfg.epochs < 64 {
        return Err(Error::Config(format!("need at least 64 epochs, got {}", cfg.epochs)));
    }
    if !(0.0..1.0).contains(&cfg.ar_coefficient) {
        return Err(Error::Config("AR coefficient must lie in [0, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let phase = Uniform::new(-PI / 12.0, PI / 12.0).expect("valid range");
    let innovation_sd = cfg.noise_level * (1.0 - cfg.ar_coefficient.powi(2)).sqrt();
    let innovation = Normal::new(0.0, innovation_sd).map_err(|e| Error::Config(e.to_string()))?;

    let mut series = Vec::with_capacity(cfg.zone_buses.len());
    for &bus in &cfg.zone_buses {
        let idx = case
            .bus_index(bus)
            .ok_or_else(|| Error::Config(format!("zone mapped to unknown bus {bus}")))?;
        let base = case.buses[idx].p_load * case.base_mva;
        if !(base > 0.0) {
            return Err(Error::Config(format!("zone bus {bus} has no base demand")));
        }
        let daily_phase = phase.sample(&mut rng);
        let weekly_phase = 2.0 * PI * phase.sample(&mut rng);
        let mut eta = 0.0;
        let mut zone = Vec::with_capacity(cfg.epochs);
        for t in 0..cfg.epochs {
            eta = cfg.ar_coefficient * eta + innovation.sample(&mut rng);
            let tf = t as f64;
            let shape = 1.0
                + cfg.diurnal_amplitude * (2.0 * PI * tf / EPOCHS_PER_DAY - PI / 2.0 + daily_phase).sin()
                + cfg.weekly_amplitude * (2.0 * PI * tf / EPOCHS_PER_WEEK + weekly_phase).sin()
                + eta;
            zone.push(base * shape.max(0.05));
        }
        series.push(zone);
    }
    Ok(LoadProfile {
        interval_minutes: cfg.interval_minutes,
        zone_buses: cfg.zone_buses.clone(),
        series,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub noise_sigma: f64,
    pub power_factor: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.01,
            power_factor: 0.8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub t: usize,
    pub x_true: StateVector,
    pub z_clean: Vec<f64>,
    pub z: Vec<f64>,
    /// DC angle estimate from the noisy active-power meters.
    pub theta_dc: Vec<f64>,
    pub n1_true: usize,
    pub n2_true: usize,
}

impl EpochRecord {
    /// Active-power slice of the noisy measurements.
    pub fn p(&self) -> &[f64] {
        &self.z[..self.z.len() / 2]
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub records: Vec<EpochRecord>,
    /// Epoch indices whose power flow did not converge.
    pub dropped: Vec<usize>,
}

pub fn build_corpus(
    case: &GridCase,
    bundle: &MatrixBundle,
    profile: &LoadProfile,
    cfg: &CorpusConfig,
) -> Result<Corpus> {
    let n = case.n_buses();
    let q_ratio = cfg.power_factor.acos().tan();
    let noise = Normal::new(0.0, cfg.noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let screener = Screener::new(bundle, case.branches.iter().map(|b| b.id).collect());
    let limits = case.limits();

    let zone_idx: Vec<usize> = profile
        .zone_buses
        .iter()
        .map(|&id| {
            case.bus_index(id)
                .ok_or_else(|| Error::Config(format!("zone mapped to unknown bus {id}")))
        })
        .collect::<Result<_>>()?;

    let mut records = Vec::with_capacity(profile.epochs());
    let mut dropped = Vec::new();
    for t in 0..profile.epochs() {
        let mut p_load = vec![0.0; n];
        for (zone, &i) in zone_idx.iter().enumerate() {
            p_load[i] += profile.series[zone][t] / case.base_mva;
        }
        let q_load: Vec<f64> = p_load.iter().map(|p| p * q_ratio).collect();
        let state = match solve_ac_power_flow(case, &p_load, &q_load) {
            Ok(sol) => sol.state,
            Err(e @ Error::Diverged { .. }) => {
                log::warn!("epoch {t} dropped: {e}");
                dropped.push(t);
                continue;
            }
            Err(e) => return Err(e),
        };
        let z_clean = h_measure(case, &state);
        let z: Vec<f64> = z_clean.iter().map(|v| v + noise.sample(&mut rng)).collect();
        let theta_dc = dc_estimate(bundle, &z[..n])?;
        let flows = dc_line_flows(bundle, &state.theta);
        let (n1_true, n2_true) = screener.counts(&flows.0, &limits);
        records.push(EpochRecord {
            t,
            x_true: state,
            z_clean,
            z,
            theta_dc,
            n1_true,
            n2_true,
        });
    }
    Ok(Corpus { records, dropped })
}

/// Contiguous chronological train / validation / test index ranges.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Range<usize>,
    pub validation: Range<usize>,
    pub test: Range<usize>,
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.70, 0.15, 0.15];

/// Floors the train and validation sizes; the remainder goes to test.
/// Fails when the training part is shorter than `min_train`.
pub fn split_corpus(len: usize, fractions: [f64; 3], min_train: usize) -> Result<Split> {
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| f < 0.0) {
        return Err(Error::Config(format!("split fractions must sum to 1, got {fractions:?}")));
    }
    let n_train = (len as f64 * fractions[0]).floor() as usize;
    let n_val = ((len as f64 * fractions[1]).floor() as usize).min(len - n_train);
    if n_train < min_train {
        return Err(Error::Config(format!(
            "corpus of {len} epochs leaves {n_train} for training, need {min_train}"
        )));
    }
    Ok(Split {
        train: 0..n_train,
        validation: n_train..n_train + n_val,
        test: n_train + n_val..len,
    })
}

fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

/// Writes the columnar corpus file. Floats use the shortest representation
/// that round-trips, so re-reading reproduces every bit.
pub fn write_corpus_csv<W: Write>(records: &[EpochRecord], out: W) -> Result<()> {
    let n = records.first().map_or(0, |r| r.x_true.n_buses());
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["epoch".to_string()];
    header.extend((1..=n).map(|i| format!("P{i}")));
    header.extend((1..=n).map(|i| format!("Q{i}")));
    header.extend((1..=n).map(|i| format!("theta{i}")));
    header.extend((1..=n).map(|i| format!("V{i}")));
    header.extend((1..=n).map(|i| format!("theta_dc{i}")));
    header.push("N1_true".into());
    header.push("N2_true".into());
    w.write_record(&header).map_err(csv_err)?;
    for r in records {
        let mut row = vec![r.t.to_string()];
        row.extend(
            r.z.iter()
                .chain(&r.x_true.theta)
                .chain(&r.x_true.v)
                .chain(&r.theta_dc)
                .map(|v| v.to_string()),
        );
        row.push(r.n1_true.to_string());
        row.push(r.n2_true.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io("corpus csv", e))
}

/// Reads a corpus file; `z_clean` is recomputed from the stored true state.
pub fn read_corpus_csv<R: Read>(case: &GridCase, input: R) -> Result<Vec<EpochRecord>> {
    let n = case.n_buses();
    let mut rd = csv::Reader::from_reader(input);
    let width = 1 + 5 * n + 2;
    let mut records = Vec::new();
    for row in rd.records() {
        let row = row.map_err(csv_err)?;
        if row.len() != width {
            return Err(Error::Parse(format!(
                "corpus row has {} columns, expected {width}",
                row.len()
            )));
        }
        let num = |k: usize| -> Result<f64> {
            row[k]
                .parse::<f64>()
                .map_err(|e| Error::Parse(format!("column {k}: {e}")))
        };
        let int = |k: usize| -> Result<usize> {
            row[k]
                .parse::<usize>()
                .map_err(|e| Error::Parse(format!("column {k}: {e}")))
        };
        let block = |start: usize, len: usize| -> Result<Vec<f64>> {
            (start..start + len).map(num).collect()
        };
        let x_true = StateVector {
            theta: block(1 + 2 * n, n)?,
            v: block(1 + 3 * n, n)?,
        };
        records.push(EpochRecord {
            t: int(0)?,
            z_clean: h_measure(case, &x_true),
            z: block(1, 2 * n)?,
            theta_dc: block(1 + 4 * n, n)?,
            x_true,
            n1_true: int(1 + 5 * n)?,
            n2_true: int(2 + 5 * n)?,
        });
    }
    Ok(records)
}
