//! Stage logic shared by the subcommands and the end-to-end tests.

use gridsec::chimera::{train, ModelVariant, Observation, TrainConfig, TrainLog, TrainSet, TrainedModel};
use gridsec::classic_estimation::{ResidualNorm, DEFAULT_SIGMA};
use gridsec::contingency::Screener;
use gridsec::dataset::{
    build_corpus, generate_profiles, split_corpus, Corpus, CorpusConfig, EpochRecord, ProfileConfig, Split,
};
use gridsec::error::Result;
use gridsec::evaluation::{estimate_counts, score_attack_campaign, score_clean, EpochCounts, MetricRow};
use gridsec::fdia::{attack_epoch, calibrated_norm, AttackConfig, AttackResult, AttackStatus, NeuralTarget};
use gridsec::grid_model::{build_matrices, GridCase, MatrixBundle};
use gridsec::powerflow::h_measure;
use sha2::{Digest, Sha256};
use std::ops::Range;

/// Clean-data quantile of the residual objective placed at the threshold.
pub const CALIBRATION_QUANTILE: f64 = 0.99;

/// Independent seed for one pipeline stage, derived from the run seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stage.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Case, matrices and screener, built once per run.
pub struct Grid {
    pub case: GridCase,
    pub bundle: MatrixBundle,
    pub screener: Screener,
}

impl Grid {
    pub fn new(case: GridCase) -> Result<Self> {
        let bundle = build_matrices(&case)?;
        let ids = case.branches.iter().map(|b| b.id).collect();
        let screener = Screener::new(&bundle, ids);
        Ok(Self {
            case,
            bundle,
            screener,
        })
    }
}

pub fn generate(grid: &Grid, epochs: usize, noise: f64, seed: u64) -> Result<Corpus> {
    let profile = generate_profiles(
        &grid.case,
        &ProfileConfig::for_case(&grid.case, epochs, stage_seed(seed, "profiles")),
    )?;
    let cfg = CorpusConfig {
        noise_sigma: noise,
        seed: stage_seed(seed, "noise"),
        ..CorpusConfig::default()
    };
    build_corpus(&grid.case, &grid.bundle, &profile, &cfg)
}

/// Training config for `variant` with every random draw keyed to `seed`.
pub fn train_config(variant: ModelVariant, seed: u64) -> TrainConfig {
    TrainConfig::new(variant, stage_seed(seed, &format!("train-{}", variant.name())))
}

pub fn train_variant(grid: &Grid, records: &[EpochRecord], cfg: &TrainConfig) -> Result<(TrainedModel, TrainLog)> {
    let data = TrainSet::from_records(records, cfg.variant, cfg.split_fractions, cfg.window())?;
    train(&grid.case, &grid.bundle, &data, cfg)
}

/// The split a model was trained under, applied to `len` records.
pub fn model_split(model: &TrainedModel, len: usize) -> Result<Split> {
    split_corpus(len, model.config.split_fractions, model.config.window().max(2))
}

/// Residual weights giving the model a 1% false-alarm rate on the clean
/// validation split at threshold `tau`.
pub fn calibrate_bdd(
    grid: &Grid,
    model: &TrainedModel,
    observations: &[Observation],
    validation: Range<usize>,
    tau: f64,
) -> Result<ResidualNorm> {
    let m = grid.case.n_meters();
    let base = ResidualNorm::uniform(m, DEFAULT_SIGMA);
    let est = model.estimate_series(observations, validation.clone())?;
    let raw: Vec<f64> = validation
        .zip(&est)
        .map(|(t, x)| base.raw(&observations[t].z, &h_measure(&grid.case, x)))
        .collect();
    calibrated_norm(m, DEFAULT_SIGMA, &raw, tau, CALIBRATION_QUANTILE)
}

/// One attack per epoch in `epochs`, each against the model with its
/// unattacked history.
pub fn attack_campaign(
    grid: &Grid,
    model: &TrainedModel,
    records: &[EpochRecord],
    observations: &[Observation],
    epochs: Range<usize>,
    norm: &ResidualNorm,
    cfg: &AttackConfig,
) -> Vec<AttackResult> {
    epochs
        .map(|t| {
            let rec = &records[t];
            match NeuralTarget::new(&grid.case, &grid.bundle, model, observations, t, norm.clone()) {
                Ok(target) => attack_epoch(&grid.case, &grid.bundle, &grid.screener, &rec.z, &target, cfg, rec.t),
                Err(e) => {
                    log::warn!("epoch {}: cannot probe model: {e}", rec.t);
                    AttackResult::skipped(rec.t, rec.z.len(), AttackStatus::EstimatorFailed, e.to_string())
                }
            }
        })
        .collect()
}

/// True contingency counts for a range of records.
pub fn true_counts(records: &[EpochRecord], range: Range<usize>) -> Vec<EpochCounts> {
    records[range]
        .iter()
        .map(|r| EpochCounts {
            epoch: r.t,
            n1: r.n1_true,
            n2: r.n2_true,
        })
        .collect()
}

/// Metric row for one model over `test`, with attack columns if a campaign
/// is given. The campaign is scored over `attack_epochs` (epoch ids).
pub fn evaluate_model(
    grid: &Grid,
    model: &TrainedModel,
    records: &[EpochRecord],
    observations: &[Observation],
    test: Range<usize>,
    campaign: Option<(&[AttackResult], &[usize], &AttackConfig)>,
) -> Result<MetricRow> {
    let est = model.estimate_series(observations, test.clone())?;
    let truth: Vec<_> = records[test.clone()].iter().map(|r| r.x_true.clone()).collect();
    let epochs: Vec<usize> = records[test.clone()].iter().map(|r| r.t).collect();
    let counts_est = estimate_counts(&grid.bundle, &grid.screener, &epochs, &est);
    let clean = score_clean(&truth, &est, &true_counts(records, test), &counts_est)?;
    let attack = match campaign {
        Some((results, attack_epochs, cfg)) => Some(score_attack_campaign(
            results,
            attack_epochs,
            &cfg.target_meters,
            cfg.unit_scale,
        )?),
        None => None,
    };
    Ok(MetricRow {
        model: model.variant().name().to_string(),
        clean,
        attack,
    })
}
