use crate::manifest::RunManifest;
use crate::pipeline::{self, Grid};
use anyhow::{anyhow, bail, Context, Result};
use clap::Args;
use gridsec::chimera::{ModelVariant, Observation, TrainConfig, TrainedModel};
use gridsec::dataset::{read_corpus_csv, write_corpus_csv, EpochRecord};
use gridsec::evaluation::{write_histograms_csv, write_metrics_csv, write_metrics_json, MetricRow};
use gridsec::fdia::{read_campaign, write_campaign, AttackConfig, AttackResult};
use gridsec::grid_model::{load_case, GridCase};
use gridsec::nn::Checkpoint;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

const OUT_ENV: &str = "GRIDSEC_OUT_DIR";

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(
        File::open(path).map_err(|e| gridsec::error::Error::Io {
            path: path.display().to_string(),
            source: e,
        })?,
    ))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?)
        .map_err(|e| gridsec::error::Error::Parse(format!("{}: {e}", path.display())).into())
}

/// `corpus.csv` → `corpus.json`.
fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("json")
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CountStats {
    pub min: usize,
    pub max: usize,
    pub mean: f64,
}

impl CountStats {
    fn of(values: impl Iterator<Item = usize> + Clone) -> Self {
        let n = values.clone().count().max(1);
        Self {
            min: values.clone().min().unwrap_or(0),
            max: values.clone().max().unwrap_or(0),
            mean: values.sum::<usize>() as f64 / n as f64,
        }
    }
}

/// Metadata written next to a corpus file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusInfo {
    pub case: serde_json::Value,
    pub epochs_requested: usize,
    pub epochs: usize,
    pub dropped: Vec<usize>,
    pub seed: u64,
    pub noise: f64,
    pub n1: CountStats,
    pub n2: CountStats,
    pub manifest: String,
}

fn resolve_case(case: Option<&Path>, corpus: Option<&Path>) -> Result<GridCase> {
    if let Some(p) = case {
        return Ok(load_case(p)?);
    }
    if let Some(c) = corpus {
        let side = sidecar(c);
        if side.exists() {
            let info: CorpusInfo = read_json(&side)?;
            return Ok(GridCase::from_json(&info.case.to_string())?);
        }
        log::warn!("no sidecar next to {}; assuming the bundled 14-bus case", c.display());
    }
    Ok(GridCase::ieee14())
}

fn load_corpus(case: &GridCase, path: &Path) -> Result<Vec<EpochRecord>> {
    read_corpus_csv(case, open(path)?).with_context(|| format!("reading corpus {}", path.display()))
}

fn load_model(case: &GridCase, path: &Path) -> Result<TrainedModel> {
    let ck = Checkpoint::load(path)?;
    TrainedModel::from_checkpoint(case, &ck).with_context(|| format!("restoring {}", path.display()))
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Case file (JSON); the bundled 14-bus case if omitted.
    #[arg(long)]
    pub case: Option<PathBuf>,
    #[arg(long, default_value_t = 9030)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Measurement noise standard deviation, per-unit.
    #[arg(long, default_value_t = 0.01)]
    pub noise: f64,
    #[arg(long, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
    /// Base name of the corpus files.
    #[arg(long, default_value = "corpus")]
    pub name: String,
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut manifest = RunManifest::new("gen-data", a, a.seed);
    let case = resolve_case(a.case.as_deref(), None)?;
    if let Some(p) = &a.case {
        manifest.inputs.push(p.clone());
    }
    ensure_dir(&a.out)?;
    let grid = Grid::new(case)?;
    let corpus = manifest
        .time("generate", || pipeline::generate(&grid, a.epochs, a.noise, a.seed))
        .context("generating corpus")?;
    let csv_path = a.out.join(format!("{}.csv", a.name));
    write_corpus_csv(&corpus.records, create(&csv_path)?)?;
    let info = CorpusInfo {
        case: serde_json::from_str(&grid.case.to_json())?,
        epochs_requested: a.epochs,
        epochs: corpus.records.len(),
        dropped: corpus.dropped.clone(),
        seed: a.seed,
        noise: a.noise,
        n1: CountStats::of(corpus.records.iter().map(|r| r.n1_true)),
        n2: CountStats::of(corpus.records.iter().map(|r| r.n2_true)),
        manifest: manifest.file_name(&a.name),
    };
    let side = sidecar(&csv_path);
    write_json(&side, &info)?;
    manifest.outputs = vec![csv_path.clone(), side];
    manifest.write(&a.out, &a.name)?;
    println!(
        "wrote {} epochs to {} ({} dropped); N-1 count {}..{} mean {:.2}; N-2 count {}..{} mean {:.2}",
        info.epochs,
        csv_path.display(),
        info.dropped.len(),
        info.n1.min,
        info.n1.max,
        info.n1.mean,
        info.n2.min,
        info.n2.max,
        info.n2.mean
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// chimera, lstm_ref or mlp.
    #[arg(long)]
    pub variant: ModelVariant,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub case: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// JSON file overriding any training-configuration fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub coarse_iterations: Option<usize>,
    #[arg(long)]
    pub fine_iterations: Option<usize>,
    #[arg(long, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
}

/// Defaults for the variant, overlaid with the config file and flags.
pub fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut value = serde_json::to_value(pipeline::train_config(a.variant, a.seed))?;
    if let Some(p) = &a.config {
        let overlay: serde_json::Value = read_json(p)?;
        let obj = overlay
            .as_object()
            .ok_or_else(|| gridsec::error::Error::Config("training config must be a JSON object".into()))?;
        for (k, v) in obj {
            if value.get(k).is_none() {
                return Err(gridsec::error::Error::Config(format!("unknown training option {k}")).into());
            }
            value[k] = v.clone();
        }
    }
    let mut cfg: TrainConfig = serde_json::from_value(value)
        .map_err(|e| gridsec::error::Error::Config(format!("training config: {e}")))?;
    if cfg.variant != a.variant {
        bail!(gridsec::error::Error::Config("config file variant disagrees with --variant".into()));
    }
    if let Some(n) = a.coarse_iterations {
        cfg.coarse_iterations = n;
    }
    if let Some(n) = a.fine_iterations {
        cfg.fine_iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(a)?;
    let mut manifest = RunManifest::new("train", &cfg, a.seed);
    manifest.inputs.push(a.corpus.clone());
    let case = resolve_case(a.case.as_deref(), Some(&a.corpus))?;
    let grid = Grid::new(case)?;
    let records = manifest.time("load", || load_corpus(&grid.case, &a.corpus))?;
    ensure_dir(&a.out)?;
    let (model, log) = manifest
        .time("train", || pipeline::train_variant(&grid, &records, &cfg))
        .with_context(|| format!("training {}", cfg.variant))?;

    let split = pipeline::model_split(&model, records.len())?;
    let obs = Observation::from_records(&records);
    let est = model.estimate_series(&obs, split.validation.clone())?;
    let truth: Vec<_> = records[split.validation.clone()].iter().map(|r| r.x_true.clone()).collect();
    let val_mape = gridsec::evaluation::state_mape(&truth, &est)?;

    let name = cfg.variant.name();
    let ck_path = a.out.join(format!("{name}.ckpt.json"));
    let log_path = a.out.join(format!("{name}.log.json"));
    model.to_checkpoint().save(&ck_path)?;
    write_json(&log_path, &log)?;
    manifest.outputs = vec![ck_path.clone(), log_path];
    manifest.write(&a.out, name)?;
    println!(
        "{name}: validation loss {:.4e} -> {:.4e} (best at iteration {}); validation MAPE total {:.3}% (θ {:.3}%, V {:.3}%); checkpoint {}",
        log.initial_validation,
        log.best_validation,
        log.best_iteration,
        100.0 * val_mape.total.value,
        100.0 * val_mape.theta.value,
        100.0 * val_mape.v.value,
        ck_path.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct AttackArgs {
    /// Checkpoint of the attacked estimator.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub case: Option<PathBuf>,
    /// Bad-data threshold on the residual objective.
    #[arg(long, default_value_t = 0.5)]
    pub tau: f64,
    /// Safety margin on the target line, MW.
    #[arg(long, default_value_t = 3.0)]
    pub fm: f64,
    /// Adam step size, MW.
    #[arg(long, default_value_t = 1e-2)]
    pub lr: f64,
    #[arg(long, default_value_t = 55)]
    pub max_steps: usize,
    /// Per-meter injection bound, MW.
    #[arg(long, default_value_t = 5.0)]
    pub cap: f64,
    #[arg(long, default_value_t = 100.0)]
    pub penalty: f64,
    /// Buses whose active-power meters are compromised.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5")]
    pub buses: Vec<u32>,
    /// Attack every single outage and keep the strongest.
    #[arg(long)]
    pub sweep_outages: bool,
    /// Attack only the first N test epochs.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignSummary {
    pub attacked: usize,
    pub skipped: usize,
    pub stealthy_fraction: f64,
    pub effective_fraction: f64,
    /// Mean |a| over targeted meters, MW.
    pub mean_abs_injection: f64,
}

/// Metadata written next to a campaign file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignInfo {
    pub variant: ModelVariant,
    pub model_config_hash: String,
    pub attack: AttackConfig,
    /// Residual scale putting the clean 99th percentile at the threshold.
    pub bdd_scale: f64,
    pub epochs: Vec<usize>,
    pub summary: CampaignSummary,
    pub manifest: String,
}

pub fn attack_config(case: &GridCase, a: &AttackArgs) -> Result<AttackConfig> {
    let mut cfg = AttackConfig::for_case(case);
    cfg.target_meters = a
        .buses
        .iter()
        .map(|&id| {
            case.bus_index(id)
                .ok_or_else(|| gridsec::error::Error::Config(format!("no bus {id} in the case")))
        })
        .collect::<std::result::Result<_, _>>()?;
    cfg.tau = a.tau;
    cfg.f_m = a.fm / case.base_mva;
    cfg.learning_rate = a.lr;
    cfg.max_steps = a.max_steps;
    cfg.magnitude_cap = a.cap / case.base_mva;
    cfg.penalty = a.penalty;
    cfg.sweep_all_outages = a.sweep_outages;
    cfg.seed = pipeline::stage_seed(a.seed, "attack");
    cfg.validate(case.n_meters(), case.n_buses())?;
    Ok(cfg)
}

pub fn summarize(results: &[AttackResult], cfg: &AttackConfig) -> CampaignSummary {
    let done: Vec<&AttackResult> = results.iter().filter(|r| r.attacked()).collect();
    let k = done.len().max(1) as f64;
    CampaignSummary {
        attacked: done.len(),
        skipped: results.len() - done.len(),
        stealthy_fraction: done.iter().filter(|r| r.stealthy).count() as f64 / k,
        effective_fraction: done.iter().filter(|r| r.effective).count() as f64 / k,
        mean_abs_injection: done
            .iter()
            .map(|r| r.mean_abs_injection(&cfg.target_meters))
            .sum::<f64>()
            / k
            * cfg.unit_scale,
    }
}

pub fn attack(a: &AttackArgs) -> Result<()> {
    let mut manifest = RunManifest::new("attack", a, a.seed);
    manifest.inputs = vec![a.model.clone(), a.corpus.clone()];
    let case = resolve_case(a.case.as_deref(), Some(&a.corpus))?;
    let grid = Grid::new(case)?;
    let records = load_corpus(&grid.case, &a.corpus)?;
    let model = load_model(&grid.case, &a.model)?;
    let cfg = attack_config(&grid.case, a)?;
    let obs = Observation::from_records(&records);
    let split = pipeline::model_split(&model, records.len())?;
    let norm = manifest.time("calibrate", || {
        pipeline::calibrate_bdd(&grid, &model, &obs, split.validation.clone(), cfg.tau)
    })?;
    let end = a.limit.map_or(split.test.end, |n| (split.test.start + n).min(split.test.end));
    let range = split.test.start..end;
    let results = manifest.time("attack", || {
        pipeline::attack_campaign(&grid, &model, &records, &obs, range.clone(), &norm, &cfg)
    });

    ensure_dir(&a.out)?;
    let name = model.variant().name();
    let path = a.out.join(format!("campaign-{name}.jsonl"));
    let mut w = create(&path)?;
    write_campaign(&results, &mut w)?;
    drop(w);
    let summary = summarize(&results, &cfg);
    let info = CampaignInfo {
        variant: model.variant(),
        model_config_hash: model.to_checkpoint().config_hash,
        attack: cfg,
        bdd_scale: norm.scale,
        epochs: records[range].iter().map(|r| r.t).collect(),
        summary: summary.clone(),
        manifest: manifest.file_name(name),
    };
    let side = sidecar(&path);
    write_json(&side, &info)?;
    manifest.outputs = vec![path.clone(), side];
    manifest.write(&a.out, name)?;
    println!(
        "{name}: {} epochs attacked, {} skipped; stealthy {:.1}%, effective {:.1}%, mean |a| {:.3} MW; campaign {}",
        summary.attacked,
        summary.skipped,
        100.0 * summary.stealthy_fraction,
        100.0 * summary.effective_fraction,
        summary.mean_abs_injection,
        path.display()
    );
    Ok(())
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    /// Checkpoints to score, one table row each.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Campaign files; each is matched to its model by variant.
    #[arg(long = "campaign")]
    pub campaigns: Vec<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub case: Option<PathBuf>,
    #[arg(long, env = OUT_ENV, default_value = "out")]
    pub out: PathBuf,
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let mut manifest = RunManifest::new("evaluate", a, 0);
    manifest.inputs = a.models.iter().chain(&a.campaigns).cloned().collect();
    manifest.inputs.push(a.corpus.clone());
    let case = resolve_case(a.case.as_deref(), Some(&a.corpus))?;
    let grid = Grid::new(case)?;
    let records = load_corpus(&grid.case, &a.corpus)?;
    let obs = Observation::from_records(&records);

    let mut campaigns = Vec::new();
    for p in &a.campaigns {
        let info: CampaignInfo = read_json(&sidecar(p))?;
        let results = read_campaign(open(p)?)?;
        if campaigns.iter().any(|(i, _): &(CampaignInfo, _)| i.variant == info.variant) {
            bail!(gridsec::error::Error::Config(format!("two campaigns for {}", info.variant)));
        }
        campaigns.push((info, results));
    }

    let mut rows: Vec<MetricRow> = Vec::new();
    for p in &a.models {
        let model = load_model(&grid.case, p)?;
        let split = pipeline::model_split(&model, records.len())?;
        let campaign = campaigns.iter().find(|(i, _)| i.variant == model.variant());
        if let Some((info, _)) = campaign {
            if info.model_config_hash != model.to_checkpoint().config_hash {
                log::warn!("campaign for {} was run against a different checkpoint", info.variant);
            }
        }
        let row = manifest
            .time(&format!("evaluate-{}", model.variant()), || {
                pipeline::evaluate_model(
                    &grid,
                    &model,
                    &records,
                    &obs,
                    split.test.clone(),
                    campaign.map(|(i, r)| (r.as_slice(), i.epochs.as_slice(), &i.attack)),
                )
            })
            .with_context(|| format!("evaluating {}", p.display()))?;
        rows.push(row);
    }
    if let Some((info, _)) = campaigns.iter().find(|(i, _)| !rows.iter().any(|r| r.model == i.variant.name())) {
        return Err(anyhow!(gridsec::error::Error::Config(format!(
            "campaign for {} has no matching --model",
            info.variant
        ))));
    }

    ensure_dir(&a.out)?;
    let csv_path = a.out.join("metrics.csv");
    let json_path = a.out.join("metrics.json");
    let hist_path = a.out.join("histograms.csv");
    write_metrics_csv(&rows, create(&csv_path)?)?;
    write_metrics_json(&rows, create(&json_path)?)?;
    write_histograms_csv(&rows, create(&hist_path)?)?;
    manifest.outputs = vec![csv_path.clone(), json_path, hist_path];
    manifest.write(&a.out, "")?;
    print!("{}", std::fs::read_to_string(&csv_path)?);
    Ok(())
}
