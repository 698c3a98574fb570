//! Experiment harness: training cells cached on disk, six studies built on
//! top of them, long-format result records and one CSV per figure.
//!
//! A *cell* is one training run, identified by the SHA-256 of its canonical
//! JSON description (dataset, architecture, seed, resolution, scale and
//! optimizer settings). Finished cells live under `<output>/cells/<key>/` and
//! are reused by every experiment that needs them, which is what makes runs
//! resumable: an interrupted experiment recomputes only the cells that never
//! completed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::data::{bilinear_resize, load_split, sample_sphere, DataError, Dataset, DatasetId};
use crate::linalg::{Matrix, PNorm};
use crate::nn::{load_checkpoint, Arch, InputShape, Network, NnError};
use crate::rng::{permutation, seeded, splitmix64, Stream};
use crate::slope::{mean_slope, mean_slope_with_ids, slope_at, SlopeReport};
use crate::stats::{ks_statistic, mean, spearman, std_dev};
use crate::train::{train_with_progress, TrainConfig, TrainError, TrainLog};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt cache entry {path}: {msg}")]
    Cache { path: PathBuf, msg: String },
}

pub type Result<T> = std::result::Result<T, ExperimentError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    SlopeGrowth,
    SlopeDistribution,
    SeedStability,
    ArchSweep,
    Resolution,
    LocalVariation,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 6] = [
        ExperimentId::SlopeGrowth,
        ExperimentId::SlopeDistribution,
        ExperimentId::SeedStability,
        ExperimentId::ArchSweep,
        ExperimentId::Resolution,
        ExperimentId::LocalVariation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::SlopeGrowth => "slope-growth",
            ExperimentId::SlopeDistribution => "slope-distribution",
            ExperimentId::SeedStability => "seed-stability",
            ExperimentId::ArchSweep => "arch-sweep",
            ExperimentId::Resolution => "resolution",
            ExperimentId::LocalVariation => "local-variation",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ExperimentId {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        ExperimentId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| {
                let valid: Vec<&str> = ExperimentId::ALL.iter().map(|id| id.name()).collect();
                format!("unknown experiment '{s}'; valid ids: {}", valid.join(", "))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile '{other}' (expected desk or paper)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

fn dense_grid(depths: &[usize], widths: &[usize]) -> Vec<Arch> {
    depths
        .iter()
        .flat_map(|&depth| widths.iter().map(move |&width| Arch::Dense { depth, width }))
        .collect()
}

fn conv_grid(depths: &[usize], channels: &[usize]) -> Vec<Arch> {
    depths
        .iter()
        .flat_map(|&depth| channels.iter().map(move |&channels| Arch::Conv { depth, channels }))
        .collect()
}

/// Fully resolved experiment configuration. Every field is concrete, so the
/// serialized form doubles as the record of what was run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub profile: Profile,
    pub datasets: Vec<DatasetId>,
    pub archs: Vec<Arch>,
    pub seeds: Vec<u64>,
    pub n_train: usize,
    pub n_val: usize,
    pub epochs: usize,
    pub slope_sample_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub p: PNorm,
    /// Seed of the train/validation subset draw, shared by all cells.
    pub data_seed: u64,
    pub resolutions: Vec<usize>,
    pub n_centers: usize,
    pub radii: Vec<f64>,
    pub points_per_sphere: usize,
    pub output_dir: PathBuf,
    pub data_dir: PathBuf,
}

impl ExperimentConfig {
    /// Defaults for an experiment under a scale profile.
    pub fn defaults(experiment: ExperimentId, profile: Profile) -> Self {
        let train = TrainConfig::default();
        let (n_train, n_val, epochs, seeds) = match profile {
            Profile::Desk => (8000, 2000, 30, vec![0, 1]),
            Profile::Paper => (50000, 10000, 150, vec![0, 1, 2, 3, 4]),
        };
        let image_sets = vec![DatasetId::Mnist, DatasetId::Kmnist, DatasetId::Fashion];
        let all_dense = dense_grid(&[1, 2, 3], &[25, 50, 100, 200]);
        let all_conv = conv_grid(&[3, 6], &[3, 6, 12, 24]);
        let (datasets, archs) = match (profile, experiment) {
            (Profile::Desk, ExperimentId::SlopeGrowth) => (vec![DatasetId::Mnist], vec![Arch::Dense { depth: 1, width: 100 }]),
            (Profile::Desk, ExperimentId::LocalVariation) => {
                (vec![DatasetId::Mnist], vec![Arch::Dense { depth: 3, width: 200 }])
            }
            (Profile::Desk, ExperimentId::Resolution) => (vec![DatasetId::Mnist], vec![Arch::Dense { depth: 1, width: 100 }]),
            (Profile::Desk, _) => (vec![DatasetId::Mnist], dense_grid(&[1], &[25, 50, 100, 200])),
            (Profile::Paper, ExperimentId::SlopeDistribution) => (vec![DatasetId::Covtype], all_dense),
            (Profile::Paper, ExperimentId::LocalVariation) => {
                (vec![DatasetId::Fashion], vec![Arch::Dense { depth: 3, width: 200 }])
            }
            (Profile::Paper, ExperimentId::Resolution) => (image_sets, vec![Arch::Dense { depth: 1, width: 100 }]),
            (Profile::Paper, _) => {
                let mut sets = image_sets;
                sets.push(DatasetId::Covtype);
                (sets, all_dense.into_iter().chain(all_conv).collect())
            }
        };
        let n_centers = match profile {
            Profile::Desk => 25,
            Profile::Paper => 250,
        };
        Self {
            experiment,
            profile,
            datasets,
            archs,
            seeds,
            n_train,
            n_val,
            epochs,
            slope_sample_size: train.slope_sample_size,
            learning_rate: train.learning_rate,
            momentum: train.momentum,
            batch_size: train.batch_size,
            p: train.p,
            data_seed: 0,
            resolutions: vec![28, 42, 56, 70, 84],
            n_centers,
            radii: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
            points_per_sphere: 500,
            output_dir: PathBuf::from("results"),
            data_dir: crate::data::data_root(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.datasets.is_empty() || self.archs.is_empty() || self.seeds.is_empty() {
            return bad("datasets, archs and seeds must be nonempty".into());
        }
        let distinct: HashSet<u64> = self.seeds.iter().copied().collect();
        if distinct.len() != self.seeds.len() {
            return bad(format!("seeds must be distinct, got {:?}", self.seeds));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return bad("n_train and n_val must be positive".into());
        }
        if self.experiment == ExperimentId::Resolution {
            if self.resolutions.is_empty() {
                return bad("resolutions must be nonempty".into());
            }
            if self.datasets.iter().any(|d| !d.is_image()) {
                return bad("the resolution experiment needs image datasets".into());
            }
        }
        if self.experiment == ExperimentId::LocalVariation {
            if self.radii.is_empty() || self.radii.iter().any(|r| !(*r > 0.0 && r.is_finite())) {
                return bad("radii must be nonempty and positive".into());
            }
            if self.n_centers == 0 || self.points_per_sphere == 0 {
                return bad("n_centers and points_per_sphere must be positive".into());
            }
        }
        if !self.datasets.iter().any(|&d| self.archs.iter().any(|&a| compatible(d, a))) {
            return bad("no dataset/architecture combination is runnable".into());
        }
        self.train_config(0).validate()?;
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed,
            slope_sample_size: self.slope_sample_size,
            p: self.p,
        }
    }

    /// SHA-256 of the configuration with the location fields blanked, so that
    /// moving the output or data directory does not change the hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.data_dir = PathBuf::new();
        sha256_hex(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

/// Convolutional architectures only run on image datasets.
pub fn compatible(dataset: DatasetId, arch: Arch) -> bool {
    dataset.is_image() || !arch.is_conv()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Everything that determines one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub dataset: DatasetId,
    pub arch: Arch,
    pub seed: u64,
    /// Upscaled side length, `None` for the native resolution.
    pub resolution: Option<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub data_seed: u64,
    pub train: TrainConfig,
}

impl CellSpec {
    pub fn key(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("cell spec serializes"))
    }
}

/// A finished training run, either fresh or reloaded from the cache.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub spec: CellSpec,
    pub log: TrainLog,
    pub initial_slopes: SlopeReport,
    pub optimal_slopes: SlopeReport,
    pub optimal: Network,
}

impl CellOutcome {
    pub fn optimal_record(&self) -> &crate::train::EpochRecord {
        self.log.record(self.log.optimal_epoch)
    }
}

/// One row of the long-format result table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub experiment: ExperimentId,
    pub config_hash: String,
    pub dataset: DatasetId,
    pub arch: Option<Arch>,
    pub seed: Option<u64>,
    /// Name of the varied quantity (`epoch`, `resolution`, `radius`, ...),
    /// empty when the record is a scalar.
    pub x_name: String,
    pub x: Option<f64>,
    pub metric: String,
    pub value: f64,
}

impl ResultRecord {
    fn identity(&self) -> String {
        let mut r = self.clone();
        r.value = 0.0;
        serde_json::to_string(&r).expect("record serializes")
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub records: Vec<ResultRecord>,
    /// `(file name, contents)` of the per-figure CSV extracts.
    pub csvs: Vec<(String, String)>,
    /// Keys of the cells under `output_dir/cells/` this run read or wrote,
    /// in first-use order.
    pub cells: Vec<String>,
}

impl ExperimentResult {
    /// Records matching the given filters, in production order.
    pub fn select<'a>(
        &'a self,
        metric: &'a str,
        dataset: Option<DatasetId>,
        arch: Option<Arch>,
        seed: Option<u64>,
    ) -> impl Iterator<Item = &'a ResultRecord> + 'a {
        self.records.iter().filter(move |r| {
            r.metric == metric
                && dataset.is_none_or(|d| r.dataset == d)
                && arch.is_none_or(|a| r.arch == Some(a))
                && seed.is_none_or(|s| r.seed == Some(s))
        })
    }

    pub fn value(&self, metric: &str, dataset: Option<DatasetId>, arch: Option<Arch>, seed: Option<u64>) -> Option<f64> {
        self.select(metric, dataset, arch, seed).next().map(|r| r.value)
    }
}

/// Append-only `results.jsonl` that never writes a record twice.
pub struct ResultsFile {
    path: PathBuf,
    seen: HashSet<String>,
}

impl ResultsFile {
    pub fn open(path: &Path) -> Result<Self> {
        let mut seen = HashSet::new();
        if path.exists() {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                match serde_json::from_str::<ResultRecord>(line) {
                    Ok(r) => {
                        seen.insert(r.identity());
                    }
                    // A torn final line from an interrupted write.
                    Err(_) => log::warn!("{}: skipping unreadable line", path.display()),
                }
            }
        }
        Ok(Self {
            path: path.to_path_buf(),
            seen,
        })
    }

    /// Appends records not yet present; returns how many were written.
    pub fn append(&mut self, records: &[ResultRecord]) -> Result<usize> {
        let mut buf = String::new();
        let mut n = 0;
        for r in records {
            if self.seen.insert(r.identity()) {
                buf.push_str(&serde_json::to_string(r).expect("record serializes"));
                buf.push('\n');
                n += 1;
            }
        }
        if n > 0 {
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(&self.path)
                .map_err(io_err(&self.path))?;
            f.write_all(buf.as_bytes()).map_err(io_err(&self.path))?;
        }
        Ok(n)
    }
}

/// Loads datasets once and runs or reloads cells.
pub struct Runner {
    cfg: ExperimentConfig,
    hash: String,
    data: HashMap<(DatasetId, Option<usize>), (Dataset, Dataset)>,
    records: Vec<ResultRecord>,
    cells: Vec<String>,
}

impl Runner {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let hash = cfg.hash();
        Ok(Self {
            cfg,
            hash,
            data: HashMap::new(),
            records: Vec::new(),
            cells: Vec::new(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    fn split(&mut self, dataset: DatasetId, resolution: Option<usize>) -> Result<&(Dataset, Dataset)> {
        let key = (dataset, resolution);
        if !self.data.contains_key(&key) {
            let (tr, va) = match resolution {
                None => load_split(&self.cfg.data_dir, dataset, self.cfg.data_seed, self.cfg.n_train, self.cfg.n_val)?,
                Some(r) => {
                    let (tr, va) = self.split(dataset, None)?;
                    (bilinear_resize(tr, r, r)?, bilinear_resize(va, r, r)?)
                }
            };
            self.data.insert(key, (tr, va));
        }
        Ok(&self.data[&key])
    }

    fn native_side(&mut self, dataset: DatasetId) -> Result<Option<usize>> {
        Ok(match self.split(dataset, None)?.0.shape {
            InputShape::Image { height, .. } => Some(height),
            InputShape::Flat(_) => None,
        })
    }

    pub fn cell_spec(&self, dataset: DatasetId, arch: Arch, seed: u64, resolution: Option<usize>) -> CellSpec {
        CellSpec {
            dataset,
            arch,
            seed,
            resolution,
            n_train: self.cfg.n_train,
            n_val: self.cfg.n_val,
            data_seed: self.cfg.data_seed,
            train: self.cfg.train_config(seed),
        }
    }

    fn cells_dir(&self) -> PathBuf {
        self.cfg.output_dir.join("cells")
    }

    /// Runs a cell, or reloads it when a finished copy is cached.
    pub fn cell(&mut self, spec: &CellSpec) -> Result<CellOutcome> {
        let key = spec.key();
        let dir = self.cells_dir().join(&key);
        if !self.cells.contains(&key) {
            self.cells.push(key.clone());
        }
        if dir.join("cell.json").exists() {
            log::info!("cell {} {} seed {}: cached", spec.dataset, spec.arch, spec.seed);
            return load_cell(&dir, spec);
        }
        log::info!("cell {} {} seed {}: training", spec.dataset, spec.arch, spec.seed);
        let (tr, va) = self.split(spec.dataset, spec.resolution)?.clone();
        let net_spec = spec.arch.to_spec(tr.shape, tr.n_classes)?;
        let net = Network::init(&net_spec, spec.seed)?;
        let out = train_with_progress(net, &tr, &va, &spec.train, |r| {
            log::debug!("  epoch {} val_loss {:.5} slope {:.4}", r.epoch, r.val_loss, r.slope.mean)
        })?;

        let tmp = self.cells_dir().join(format!("{key}.partial"));
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(io_err(&tmp))?;
        }
        out.save(&tmp)?;
        let spec_json = serde_json::to_string_pretty(spec).expect("cell spec serializes") + "\n";
        fs::write(tmp.join("cell.json"), spec_json).map_err(io_err(&tmp))?;
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_err(&dir))?;
        }
        fs::rename(&tmp, &dir).map_err(io_err(&dir))?;
        Ok(CellOutcome {
            spec: spec.clone(),
            log: out.log,
            initial_slopes: out.initial_slopes,
            optimal_slopes: out.optimal_slopes,
            optimal: out.optimal,
        })
    }

    fn push(&mut self, dataset: DatasetId, arch: Option<Arch>, seed: Option<u64>, x: Option<(&str, f64)>, metric: &str, value: f64) {
        self.records.push(ResultRecord {
            experiment: self.cfg.experiment,
            config_hash: self.hash.clone(),
            dataset,
            arch,
            seed,
            x_name: x.map_or(String::new(), |(n, _)| n.to_string()),
            x: x.map(|(_, v)| v),
            metric: metric.to_string(),
            value,
        });
    }

    fn finish(self, csvs: Vec<(String, String)>) -> ExperimentResult {
        ExperimentResult {
            config_hash: self.hash,
            config: self.cfg,
            records: self.records,
            csvs,
            cells: self.cells,
        }
    }

    fn grid(&self) -> Vec<(DatasetId, Arch, u64)> {
        let mut out = Vec::new();
        for &d in &self.cfg.datasets {
            for &a in self.cfg.archs.iter().filter(|&&a| compatible(d, a)) {
                for &s in &self.cfg.seeds {
                    out.push((d, a, s));
                }
            }
        }
        out
    }
}

fn load_cell(dir: &Path, spec: &CellSpec) -> Result<CellOutcome> {
    let read = |name: &str| -> Result<String> {
        let p = dir.join(name);
        fs::read_to_string(&p).map_err(io_err(&p))
    };
    let corrupt = |msg: String| ExperimentError::Cache {
        path: dir.to_path_buf(),
        msg,
    };
    let stored: CellSpec = serde_json::from_str(&read("cell.json")?).map_err(|e| corrupt(e.to_string()))?;
    if &stored != spec {
        return Err(corrupt("cell.json does not match the requested cell".into()));
    }
    let log = TrainLog::from_jsonl(&read("train_log.jsonl")?).map_err(|e| corrupt(e.to_string()))?;
    let initial_slopes = SlopeReport::from_csv(spec.train.p, &read("slopes_initial.csv")?).map_err(corrupt)?;
    let optimal_slopes = SlopeReport::from_csv(spec.train.p, &read("slopes_optimal.csv")?).map_err(corrupt)?;
    let optimal = load_checkpoint(&dir.join("optimal.ckpt"))?;
    Ok(CellOutcome {
        spec: spec.clone(),
        log,
        initial_slopes,
        optimal_slopes,
        optimal,
    })
}

fn csv_f(v: f64) -> String {
    format!("{v:?}")
}

/// Spearman correlation between epoch index and mean slope over epochs
/// `1..=round(0.8 E)`.
pub fn early_growth_spearman(log: &TrainLog) -> f64 {
    let k = ((log.epochs.len() as f64) * 0.8).round() as usize;
    let rs = &log.epochs[..k.min(log.epochs.len())];
    let e: Vec<f64> = rs.iter().map(|r| r.epoch as f64).collect();
    let s: Vec<f64> = rs.iter().map(|r| r.slope.mean).collect();
    spearman(&e, &s)
}

pub fn run_slope_growth(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut run = Runner::new(cfg.clone())?;
    let mut csv = String::from("dataset,arch,seed,epoch,mean_slope,std_slope,train_loss,val_loss,val_accuracy\n");
    for (d, a, s) in run.grid() {
        let cell = run.cell(&run.cell_spec(d, a, s, None))?;
        for r in std::iter::once(&cell.log.initial).chain(&cell.log.epochs) {
            let x = Some(("epoch", r.epoch as f64));
            run.push(d, Some(a), Some(s), x, "mean_slope", r.slope.mean);
            run.push(d, Some(a), Some(s), x, "std_slope", r.slope.std);
            run.push(d, Some(a), Some(s), x, "val_loss", r.val_loss);
            run.push(d, Some(a), Some(s), x, "val_accuracy", r.val_accuracy);
            let _ = writeln!(
                csv,
                "{d},{a},{s},{},{},{},{},{},{}",
                r.epoch,
                csv_f(r.slope.mean),
                csv_f(r.slope.std),
                csv_f(r.train_loss),
                csv_f(r.val_loss),
                csv_f(r.val_accuracy)
            );
        }
        let opt = cell.optimal_record();
        run.push(d, Some(a), Some(s), None, "spearman_first80", early_growth_spearman(&cell.log));
        run.push(d, Some(a), Some(s), None, "optimal_epoch", cell.log.optimal_epoch as f64);
        run.push(d, Some(a), Some(s), None, "initial_mean_slope", cell.log.initial.slope.mean);
        run.push(d, Some(a), Some(s), None, "optimal_mean_slope", opt.slope.mean);
        run.push(d, Some(a), Some(s), None, "optimal_val_accuracy", opt.val_accuracy);
    }
    Ok(run.finish(vec![("fig1_slope_growth.csv".into(), csv)]))
}

pub fn run_slope_distribution(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut run = Runner::new(cfg.clone())?;
    let mut csv = String::from("dataset,arch,seed,stage,point_id,slope\n");
    for (d, a, s) in run.grid() {
        let cell = run.cell(&run.cell_spec(d, a, s, None))?;
        for (stage, rep) in [("initial", &cell.initial_slopes), ("optimal", &cell.optimal_slopes)] {
            for pt in &rep.points {
                let _ = writeln!(csv, "{d},{a},{s},{stage},{},{}", pt.point_id, csv_f(pt.slope));
            }
            run.push(d, Some(a), Some(s), None, &format!("{stage}_mean_slope"), rep.summary.mean);
            run.push(d, Some(a), Some(s), None, &format!("{stage}_std_slope"), rep.summary.std);
            run.push(d, Some(a), Some(s), None, &format!("{stage}_median_slope"), rep.summary.median);
        }
    }
    Ok(run.finish(vec![("fig2_distributions.csv".into(), csv)]))
}

pub fn run_seed_stability(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut run = Runner::new(cfg.clone())?;
    let mut per_seed = String::from("dataset,arch,seed,n,mean_slope,std_slope,q1,median,q3\n");
    let mut pairs = String::from("dataset,arch,seed_a,seed_b,ks,rel_mean_diff\n");
    let seeds = run.cfg.seeds.clone();
    for d in run.cfg.datasets.clone() {
        for a in run.cfg.archs.clone().into_iter().filter(|&a| compatible(d, a)) {
            let mut samples = Vec::new();
            for &s in &seeds {
                let cell = run.cell(&run.cell_spec(d, a, s, None))?;
                let sm = cell.optimal_slopes.summary;
                let _ = writeln!(
                    per_seed,
                    "{d},{a},{s},{},{},{},{},{},{}",
                    sm.n,
                    csv_f(sm.mean),
                    csv_f(sm.std),
                    csv_f(sm.q1),
                    csv_f(sm.median),
                    csv_f(sm.q3)
                );
                run.push(d, Some(a), Some(s), None, "optimal_mean_slope", sm.mean);
                run.push(d, Some(a), Some(s), None, "optimal_std_slope", sm.std);
                samples.push(cell.optimal_slopes.values());
            }
            let means: Vec<f64> = samples.iter().map(|v| mean(v)).collect();
            run.push(d, Some(a), None, None, "mean_over_seeds", mean(&means));
            run.push(d, Some(a), None, None, "std_over_seeds", std_dev(&means));
            for i in 0..seeds.len() {
                for j in i + 1..seeds.len() {
                    let ks = ks_statistic(&samples[i], &samples[j]);
                    let rel = (means[i] - means[j]).abs() / (0.5 * (means[i] + means[j]));
                    let _ = writeln!(pairs, "{d},{a},{},{},{},{}", seeds[i], seeds[j], csv_f(ks), csv_f(rel));
                    let tag = format!("{}-{}", seeds[i], seeds[j]);
                    run.push(d, Some(a), None, None, &format!("ks:{tag}"), ks);
                    run.push(d, Some(a), None, None, &format!("rel_mean_diff:{tag}"), rel);
                }
            }
        }
    }
    Ok(run.finish(vec![
        ("fig3_seed_stability.csv".into(), per_seed),
        ("fig3_seed_pairs.csv".into(), pairs),
    ]))
}

pub fn run_arch_sweep(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut run = Runner::new(cfg.clone())?;
    let mut csv = String::from(
        "dataset,arch,kind,depth,size,n_seeds,mean_slope,std_slope_over_seeds,val_accuracy,val_loss,val_loss_per_batch\n",
    );
    for d in run.cfg.datasets.clone() {
        for a in run.cfg.archs.clone().into_iter().filter(|&a| compatible(d, a)) {
            let (mut slopes, mut accs, mut losses, mut per_batch) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for s in run.cfg.seeds.clone() {
                let cell = run.cell(&run.cell_spec(d, a, s, None))?;
                let r = cell.optimal_record().clone();
                run.push(d, Some(a), Some(s), None, "optimal_mean_slope", r.slope.mean);
                run.push(d, Some(a), Some(s), None, "optimal_val_accuracy", r.val_accuracy);
                slopes.push(r.slope.mean);
                accs.push(r.val_accuracy);
                losses.push(r.val_loss);
                per_batch.push(r.val_loss_per_batch);
            }
            let (kind, depth, size) = match a {
                Arch::Dense { depth, width } => ("dense", depth, width),
                Arch::Conv { depth, channels } => ("conv", depth, channels),
            };
            run.push(d, Some(a), None, None, "mean_slope", mean(&slopes));
            run.push(d, Some(a), None, None, "std_slope_over_seeds", std_dev(&slopes));
            run.push(d, Some(a), None, None, "val_accuracy", mean(&accs));
            run.push(d, Some(a), None, None, "val_loss", mean(&losses));
            let _ = writeln!(
                csv,
                "{d},{a},{kind},{depth},{size},{},{},{},{},{},{}",
                slopes.len(),
                csv_f(mean(&slopes)),
                csv_f(std_dev(&slopes)),
                csv_f(mean(&accs)),
                csv_f(mean(&losses)),
                csv_f(mean(&per_batch))
            );
        }
    }
    Ok(run.finish(vec![("fig4_arch_sweep.csv".into(), csv)]))
}

pub fn run_resolution(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut run = Runner::new(cfg.clone())?;
    let mut csv = String::from("dataset,arch,seed,resolution,mean_slope,std_slope,val_accuracy\n");
    let mut resolutions = run.cfg.resolutions.clone();
    resolutions.sort_unstable();
    resolutions.dedup();
    for (d, a, s) in run.grid() {
        let native = run.native_side(d)?;
        let mut curve = Vec::new();
        for &res in &resolutions {
            let resolution = (Some(res) != native).then_some(res);
            let cell = run.cell(&run.cell_spec(d, a, s, resolution))?;
            let r = cell.optimal_record().clone();
            run.push(d, Some(a), Some(s), Some(("resolution", res as f64)), "optimal_mean_slope", r.slope.mean);
            let _ = writeln!(
                csv,
                "{d},{a},{s},{res},{},{},{}",
                csv_f(r.slope.mean),
                csv_f(r.slope.std),
                csv_f(r.val_accuracy)
            );
            curve.push((res, r.slope.mean));
        }
        let at = |res: usize| curve.iter().find(|c| c.0 == res).map(|c| c.1);
        if let (Some(a28), Some(a56)) = (at(28), at(56)) {
            run.push(d, Some(a), Some(s), None, "ratio_28_56", a28 / a56);
        }
        let decreasing = curve.windows(2).all(|w| w[1].1 < w[0].1);
        run.push(d, Some(a), Some(s), None, "strictly_decreasing", f64::from(u8::from(decreasing)));
    }
    Ok(run.finish(vec![("fig6_resolution.csv".into(), csv)]))
}

/// For every center row and radius, the mean over `n_per_sphere` sphere
/// points of `|slope(y) - slope(x0)| / slope(x0)`. Returns
/// `[center][radius]`.
pub fn local_relative_differences(
    net: &Network,
    centers: &Matrix,
    radii: &[f64],
    n_per_sphere: usize,
    p: PNorm,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(centers.rows());
    for c in 0..centers.rows() {
        let x0 = centers.row(c);
        let s0 = slope_at(net, x0, p)?;
        let mut row = Vec::with_capacity(radii.len());
        for (ri, &r) in radii.iter().enumerate() {
            let sphere_seed = splitmix64(seed ^ splitmix64((c as u64) << 16 | ri as u64));
            let pts = sample_sphere(x0, r, n_per_sphere, sphere_seed)?;
            let rep = mean_slope(net, &pts, p)?;
            let diffs: Vec<f64> = rep.values().iter().map(|s| (s - s0).abs() / s0).collect();
            row.push(mean(&diffs));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn run_local_variation(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let mut run = Runner::new(cfg.clone())?;
    let mut csv = String::from("dataset,arch,seed,center_id,center_slope,radius,mean_rel_diff\n");
    let radii = run.cfg.radii.clone();
    for (d, a, s) in run.grid() {
        let cell = run.cell(&run.cell_spec(d, a, s, None))?;
        let n_centers = run.cfg.n_centers;
        let (tr, _) = run.split(d, None)?;
        let mut ids = permutation(tr.len(), &mut seeded(s, Stream::Centers));
        ids.truncate(n_centers.min(tr.len()));
        let centers = tr.select(&ids).features;
        let center_slopes = mean_slope_with_ids(&cell.optimal, &centers, &ids, run.cfg.p)?;
        let table = local_relative_differences(
            &cell.optimal,
            &centers,
            &radii,
            run.cfg.points_per_sphere,
            run.cfg.p,
            splitmix64(s),
        )?;
        for (ci, row) in table.iter().enumerate() {
            for (ri, v) in row.iter().enumerate() {
                let _ = writeln!(
                    csv,
                    "{d},{a},{s},{},{},{},{}",
                    ids[ci],
                    csv_f(center_slopes.points[ci].slope),
                    csv_f(radii[ri]),
                    csv_f(*v)
                );
            }
        }
        for (ri, &r) in radii.iter().enumerate() {
            let col: Vec<f64> = table.iter().map(|row| row[ri]).collect();
            run.push(d, Some(a), Some(s), Some(("radius", r)), "mean_rel_diff", mean(&col));
        }
    }
    Ok(run.finish(vec![("fig5_local_variation.csv".into(), csv)]))
}

/// Runs the configured experiment, then writes its CSVs, appends new records
/// to `results.jsonl` and stores the resolved config under `configs/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    let out_dir = &cfg.output_dir;
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let result = match cfg.experiment {
        ExperimentId::SlopeGrowth => run_slope_growth(cfg),
        ExperimentId::SlopeDistribution => run_slope_distribution(cfg),
        ExperimentId::SeedStability => run_seed_stability(cfg),
        ExperimentId::ArchSweep => run_arch_sweep(cfg),
        ExperimentId::Resolution => run_resolution(cfg),
        ExperimentId::LocalVariation => run_local_variation(cfg),
    }?;
    write_outputs(&result)?;
    Ok(result)
}

pub fn write_outputs(result: &ExperimentResult) -> Result<()> {
    let out_dir = &result.config.output_dir;
    let cfg_dir = out_dir.join("configs");
    fs::create_dir_all(&cfg_dir).map_err(io_err(&cfg_dir))?;
    let cfg_path = cfg_dir.join(format!("{}.json", result.config_hash));
    let body = serde_json::to_string_pretty(&result.config).expect("config serializes") + "\n";
    fs::write(&cfg_path, body).map_err(io_err(&cfg_path))?;
    for (name, content) in &result.csvs {
        let path = out_dir.join(name);
        fs::write(&path, content).map_err(io_err(&path))?;
    }
    let appended = ResultsFile::open(&out_dir.join("results.jsonl"))?.append(&result.records)?;
    log::info!("{}: {} new result records", result.config.experiment, appended);
    Ok(())
}

/// Groups record values by a key, keeping first-seen order within groups.
pub fn group_values<K: Ord>(records: &[&ResultRecord], key: impl Fn(&ResultRecord) -> K) -> BTreeMap<K, Vec<f64>> {
    let mut out: BTreeMap<K, Vec<f64>> = BTreeMap::new();
    for r in records {
        out.entry(key(r)).or_default().push(r.value);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_ids_round_trip_and_list_valid_ids() {
        for id in ExperimentId::ALL {
            assert_eq!(id.name().parse::<ExperimentId>().unwrap(), id);
        }
        let err = "fig7".parse::<ExperimentId>().unwrap_err();
        assert!(err.contains("slope-growth") && err.contains("local-variation"));
    }

    #[test]
    fn profiles_differ_in_scale() {
        let d = ExperimentConfig::defaults(ExperimentId::ArchSweep, Profile::Desk);
        let p = ExperimentConfig::defaults(ExperimentId::ArchSweep, Profile::Paper);
        assert_eq!((d.n_train, d.n_val, d.epochs, d.seeds.len()), (8000, 2000, 30, 2));
        assert_eq!((p.epochs, p.seeds.len(), p.archs.len()), (150, 5, 20));
        assert_ne!(d.hash(), p.hash());
    }

    #[test]
    fn hash_ignores_locations() {
        let a = ExperimentConfig::defaults(ExperimentId::SlopeGrowth, Profile::Desk);
        let mut b = a.clone();
        b.output_dir = "/elsewhere".into();
        b.data_dir = "/data2".into();
        assert_eq!(a.hash(), b.hash());
        b.learning_rate = 0.0;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn validation_rejects_bad_grids() {
        let mut c = ExperimentConfig::defaults(ExperimentId::SlopeGrowth, Profile::Desk);
        c.seeds = vec![1, 1];
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(ExperimentId::SlopeGrowth, Profile::Desk);
        c.archs.clear();
        assert!(c.validate().is_err());
        let mut c = ExperimentConfig::defaults(ExperimentId::ArchSweep, Profile::Desk);
        c.datasets = vec![DatasetId::Covtype];
        c.archs = vec!["conv:3x3".parse().unwrap()];
        assert!(c.validate().is_err());
        let p = ExperimentConfig::defaults(ExperimentId::ArchSweep, Profile::Paper);
        assert!(p.validate().is_ok());
        let runner = Runner::new(p).unwrap();
        assert!(runner.grid().iter().all(|&(d, a, _)| compatible(d, a)));
        assert_eq!(runner.grid().len(), (3 * 20 + 12) * 5);
    }

    #[test]
    fn results_file_deduplicates() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        let rec = ResultRecord {
            experiment: ExperimentId::SlopeGrowth,
            config_hash: "h".into(),
            dataset: DatasetId::Mnist,
            arch: None,
            seed: Some(0),
            x_name: "epoch".into(),
            x: Some(1.0),
            metric: "m".into(),
            value: 0.5,
        };
        assert_eq!(ResultsFile::open(&path).unwrap().append(&[rec.clone()]).unwrap(), 1);
        assert_eq!(ResultsFile::open(&path).unwrap().append(&[rec]).unwrap(), 0);
        assert_eq!(fs::read_to_string(&path).unwrap().lines().count(), 1);
    }
}
