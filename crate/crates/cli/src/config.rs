//! Layered configuration: built-in defaults, then a TOML file, then flags.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use slope_core::data::{data_root, DatasetId};
use slope_core::experiments::{ExperimentConfig, ExperimentId, Profile};
use slope_core::linalg::PNorm;
use slope_core::nn::Arch;
use slope_core::train::TrainConfig;

/// Bad input from the user: flags, config files or their values. Exits
/// with status 2 instead of 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

pub fn read_table(path: &Path) -> Result<toml::Table> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    text.parse::<toml::Table>()
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// `defaults` with the keys of `file` laid over it. Unknown keys are
/// rejected by the target type.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<(&Path, toml::Table)>) -> Result<T> {
    let Some((path, table)) = file else {
        return Ok(toml::Value::try_from(defaults)?.try_into()?);
    };
    let mut base = match toml::Value::try_from(defaults)? {
        toml::Value::Table(t) => t,
        _ => unreachable!("configs serialize to tables"),
    };
    merge(&mut base, table);
    toml::Value::Table(base)
        .try_into()
        .map_err(|e| usage(format!("{}: {e}", path.display())))
}

pub fn to_toml<T: Serialize>(cfg: &T) -> String {
    toml::to_string_pretty(cfg).expect("config serializes to TOML")
}

fn file_profile(table: Option<&toml::Table>) -> Result<Option<Profile>> {
    match table.and_then(|t| t.get("profile")) {
        None => Ok(None),
        Some(toml::Value::String(s)) => s.parse().map(Some).map_err(usage),
        Some(other) => Err(usage(format!("profile must be a string, got {other}"))),
    }
}

/// Resolved settings of `slope train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    pub profile: Profile,
    pub dataset: DatasetId,
    pub arch: Arch,
    pub n_train: usize,
    pub n_val: usize,
    pub data_seed: u64,
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub train: TrainConfig,
}

impl TrainRunConfig {
    pub fn defaults(profile: Profile) -> Self {
        let (n_train, n_val, epochs) = match profile {
            Profile::Desk => (8000, 2000, 30),
            Profile::Paper => (50000, 10000, 150),
        };
        Self {
            profile,
            dataset: DatasetId::Mnist,
            arch: Arch::Dense { depth: 1, width: 100 },
            n_train,
            n_val,
            data_seed: 0,
            data_dir: data_root(),
            output_dir: PathBuf::from("runs/train"),
            train: TrainConfig {
                epochs,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct TrainFlags {
    /// Scale profile supplying the defaults.
    #[arg(long)]
    pub profile: Option<Profile>,
    #[arg(long)]
    pub dataset: Option<DatasetId>,
    /// Architecture, `dense:DxW` or `conv:DxC`.
    #[arg(long)]
    pub arch: Option<Arch>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Seed of initialization, shuffling and the slope sample.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Number of training points whose slope is tracked.
    #[arg(long)]
    pub slope_sample: Option<usize>,
    #[arg(long)]
    pub p: Option<PNorm>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, short)]
    pub output_dir: Option<PathBuf>,
}

pub fn resolve_train(flags: &TrainFlags, config: Option<&Path>) -> Result<TrainRunConfig> {
    let table = config.map(read_table).transpose()?;
    let profile = flags.profile.or(file_profile(table.as_ref())?).unwrap_or_default();
    let mut cfg = layered(&TrainRunConfig::defaults(profile), config.zip(table))?;
    cfg.profile = profile;
    macro_rules! set {
        ($($flag:ident => $($field:ident).+;)*) => {
            $(if let Some(v) = flags.$flag.clone() { cfg.$($field).+ = v; })*
        };
    }
    set! {
        dataset => dataset;
        arch => arch;
        n_train => n_train;
        n_val => n_val;
        data_seed => data_seed;
        data_dir => data_dir;
        output_dir => output_dir;
        epochs => train.epochs;
        learning_rate => train.learning_rate;
        momentum => train.momentum;
        batch_size => train.batch_size;
        seed => train.seed;
        slope_sample => train.slope_sample_size;
        p => train.p;
    }
    cfg.train.validate().map_err(|e| usage(e.to_string()))?;
    if cfg.n_train == 0 || cfg.n_val == 0 {
        return Err(usage("n_train and n_val must be positive"));
    }
    Ok(cfg)
}

/// Resolved settings of `slope slope`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlopeRunConfig {
    pub checkpoint: PathBuf,
    /// Training file of this dataset supplies the points...
    pub dataset: Option<DatasetId>,
    /// ...unless a CSV of points (one per row) is given.
    pub points: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub p: PNorm,
    /// Points drawn from the source; 0 takes all of them.
    pub sample: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

impl Default for SlopeRunConfig {
    fn default() -> Self {
        Self {
            checkpoint: PathBuf::new(),
            dataset: None,
            points: None,
            data_dir: data_root(),
            p: PNorm::Two,
            sample: 750,
            seed: 0,
            output_dir: PathBuf::from("runs/slope"),
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct SlopeFlags {
    /// Network checkpoint to evaluate.
    pub checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "points")]
    pub dataset: Option<DatasetId>,
    /// CSV file of input points, one per row.
    #[arg(long)]
    pub points: Option<PathBuf>,
    #[arg(long)]
    pub p: Option<PNorm>,
    /// Number of points to sample (0 = all).
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, short)]
    pub output_dir: Option<PathBuf>,
}

pub fn resolve_slope(flags: &SlopeFlags, config: Option<&Path>) -> Result<SlopeRunConfig> {
    let table = config.map(read_table).transpose()?;
    let mut cfg = layered(&SlopeRunConfig::default(), config.zip(table))?;
    if let Some(c) = &flags.checkpoint {
        cfg.checkpoint = c.clone();
    }
    if let Some(d) = flags.dataset {
        cfg.dataset = Some(d);
        cfg.points = None;
    }
    if let Some(p) = &flags.points {
        cfg.points = Some(p.clone());
        cfg.dataset = None;
    }
    if let Some(v) = flags.p {
        cfg.p = v;
    }
    if let Some(v) = flags.sample {
        cfg.sample = v;
    }
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = &flags.data_dir {
        cfg.data_dir = v.clone();
    }
    if let Some(v) = &flags.output_dir {
        cfg.output_dir = v.clone();
    }
    if cfg.checkpoint.as_os_str().is_empty() {
        return Err(usage("a checkpoint is required"));
    }
    if cfg.dataset.is_none() && cfg.points.is_none() {
        return Err(usage("give either --dataset or --points"));
    }
    if cfg.dataset.is_some() && cfg.points.is_some() {
        return Err(usage("--dataset and --points are mutually exclusive"));
    }
    Ok(cfg)
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct ExperimentFlags {
    /// Experiment to run.
    pub id: Option<ExperimentId>,
    #[arg(long)]
    pub profile: Option<Profile>,
    /// Comma-separated dataset names.
    #[arg(long, value_delimiter = ',')]
    pub datasets: Option<Vec<DatasetId>>,
    /// Comma-separated architectures.
    #[arg(long, value_delimiter = ',')]
    pub archs: Option<Vec<Arch>>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_val: Option<usize>,
    #[arg(long)]
    pub slope_sample: Option<usize>,
    #[arg(long = "lr")]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub p: Option<PNorm>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub resolutions: Option<Vec<usize>>,
    #[arg(long)]
    pub n_centers: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub radii: Option<Vec<f64>>,
    #[arg(long)]
    pub points_per_sphere: Option<usize>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, short)]
    pub output_dir: Option<PathBuf>,
}

pub fn resolve_experiment(flags: &ExperimentFlags, config: Option<&Path>) -> Result<ExperimentConfig> {
    let table = config.map(read_table).transpose()?;
    let file_id = match table.as_ref().and_then(|t| t.get("experiment")) {
        None => None,
        Some(toml::Value::String(s)) => Some(s.parse::<ExperimentId>().map_err(usage)?),
        Some(other) => return Err(usage(format!("experiment must be a string, got {other}"))),
    };
    let id = flags.id.or(file_id).ok_or_else(|| {
        let valid: Vec<&str> = ExperimentId::ALL.iter().map(|i| i.name()).collect();
        usage(format!("an experiment id is required; valid ids: {}", valid.join(", ")))
    })?;
    let profile = flags.profile.or(file_profile(table.as_ref())?).unwrap_or_default();
    let mut cfg = layered(&ExperimentConfig::defaults(id, profile), config.zip(table))?;
    cfg.experiment = id;
    cfg.profile = profile;
    macro_rules! set {
        ($($field:ident),*) => {
            $(if let Some(v) = flags.$field.clone() { cfg.$field = v; })*
        };
    }
    set!(
        datasets,
        archs,
        seeds,
        epochs,
        n_train,
        n_val,
        learning_rate,
        momentum,
        batch_size,
        p,
        data_seed,
        resolutions,
        n_centers,
        radii,
        points_per_sphere,
        data_dir,
        output_dir
    );
    if let Some(v) = flags.slope_sample {
        cfg.slope_sample_size = v;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

/// Resolved settings of `slope verify`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerifyRunConfig {
    /// Reduced sample sizes with the looser tolerances listed per check.
    pub quick: bool,
    pub seed: u64,
    /// Negative control: compute the Jacobian with every ReLU switched on.
    pub inject_fault: bool,
    pub output_dir: PathBuf,
}

impl Default for VerifyRunConfig {
    fn default() -> Self {
        Self {
            quick: false,
            seed: 0,
            inject_fault: false,
            output_dir: PathBuf::from("runs/verify"),
        }
    }
}

#[derive(Debug, Clone, Default, clap::Args)]
pub struct VerifyFlags {
    /// Smaller samples and looser tolerances.
    #[arg(long)]
    pub quick: bool,
    /// Break the Jacobian on purpose; the mask-sensitive checks must fail.
    #[arg(long)]
    pub inject_fault: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub output_dir: Option<PathBuf>,
}

pub fn resolve_verify(flags: &VerifyFlags, config: Option<&Path>) -> Result<VerifyRunConfig> {
    let table = config.map(read_table).transpose()?;
    let mut cfg = layered(&VerifyRunConfig::default(), config.zip(table))?;
    cfg.quick |= flags.quick;
    cfg.inject_fault |= flags.inject_fault;
    if let Some(v) = flags.seed {
        cfg.seed = v;
    }
    if let Some(v) = &flags.output_dir {
        cfg.output_dir = v.clone();
    }
    Ok(cfg)
}
