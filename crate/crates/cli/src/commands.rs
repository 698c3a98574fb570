use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context as _, Result};
use log::info;
use serde::Serialize;
use slope_core::data::{bilinear_resize, load_idx, load_split, Dataset, DatasetId};
use slope_core::experiments::{compatible, run_experiment};
use slope_core::linalg::Matrix;
use slope_core::nn::{load_checkpoint, InputShape, Network};
use slope_core::slope::{mean_slope_with_ids, SlopeReport};
use slope_core::train::{slope_sample_indices, train_with_progress};
use slope_core::verify::{run_checks, Fault, VerifyOptions};

use crate::config::{
    resolve_experiment, resolve_slope, resolve_train, resolve_verify, to_toml, usage, ExperimentFlags,
    SlopeFlags, SlopeRunConfig, TrainFlags, TrainRunConfig, VerifyFlags,
};
use crate::manifest::{checksums, files_under, now, quarantine_dir, RunManifest, RunStatus, Staging, MANIFEST_FILE};

/// Settings shared by every subcommand.
pub struct Context {
    pub config: Option<PathBuf>,
    pub print_config: bool,
    pub argv: Vec<String>,
}

impl Context {
    /// Manifest with everything but the outcome filled in.
    pub fn manifest<T: Serialize>(&self, command: &str, cfg: &T, seed: Option<u64>, started_at: String, output_dir: &Path) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            argv: self.argv.clone(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            config_path: self.config.clone(),
            config: serde_json::to_value(cfg).expect("config serializes"),
            seed,
            started_at,
            finished_at: String::new(),
            output_dir: output_dir.to_path_buf(),
            status: RunStatus::Ok,
            error: None,
            artifacts: BTreeMap::new(),
            inputs: BTreeMap::new(),
        }
    }

    /// Prints the resolved config and reports whether the command should
    /// stop there.
    fn printed<T: Serialize>(&self, cfg: &T) -> bool {
        if self.print_config {
            print!("{}", to_toml(cfg));
        }
        self.print_config
    }
}

/// Commits staged artifacts and writes `manifest.json` next to them, or on
/// error moves them to quarantine together with a failed manifest.
fn finish(staging: Staging, mut manifest: RunManifest, label: &str, outcome: Result<()>) -> Result<()> {
    manifest.finished_at = now();
    match outcome {
        Ok(()) => {
            let out = staging.output_dir.clone();
            let placed = staging.commit()?;
            manifest.artifacts = checksums(&out, &placed)?;
            manifest.write(&out.join(MANIFEST_FILE))
        }
        Err(e) => {
            let q = staging.quarantine(label)?;
            manifest.status = RunStatus::Failed;
            manifest.error = Some(format!("{e:#}"));
            manifest.artifacts = checksums(&q, &files_under(&q)?)?;
            manifest.write(&q.join(MANIFEST_FILE))?;
            Err(anyhow!("{e:#} (partial outputs moved to {})", q.display()))
        }
    }
}

fn require_files(id: DatasetId, root: &Path) -> Result<()> {
    let missing: Vec<String> = id
        .files(root)
        .into_iter()
        .filter(|f| !f.exists())
        .map(|f| f.display().to_string())
        .collect();
    if missing.is_empty() {
        Ok(())
    } else {
        Err(anyhow!(
            "{id} files not found: {} (set --data-dir or SLOPE_DATA_DIR, or run `slope fetch-data`)",
            missing.join(", ")
        ))
    }
}

pub fn train(ctx: &Context, flags: &TrainFlags) -> Result<()> {
    let cfg = resolve_train(flags, ctx.config.as_deref())?;
    if ctx.printed(&cfg) {
        return Ok(());
    }
    if !compatible(cfg.dataset, cfg.arch) {
        return Err(usage(format!("architecture {} does not apply to {}", cfg.arch, cfg.dataset)));
    }
    let started = now();
    require_files(cfg.dataset, &cfg.data_dir)?;
    let (tr, va) = load_split(&cfg.data_dir, cfg.dataset, cfg.data_seed, cfg.n_train, cfg.n_val)?;
    info!("{}: {} training and {} validation points", cfg.dataset, tr.len(), va.len());

    let staging = Staging::new(&cfg.output_dir)?;
    let manifest = ctx.manifest("train", &cfg, Some(cfg.train.seed), started, &cfg.output_dir);
    let outcome = train_into(&cfg, &tr, &va, &staging.dir);
    finish(staging, manifest, "train", outcome)
}

fn train_into(cfg: &TrainRunConfig, tr: &Dataset, va: &Dataset, dir: &Path) -> Result<()> {
    let spec = cfg.arch.to_spec(tr.shape, tr.n_classes)?;
    let net = Network::init(&spec, cfg.train.seed)?;
    info!("{} with {} parameters", cfg.arch, net.parameter_count());
    let out = train_with_progress(net, tr, va, &cfg.train, |r| {
        info!(
            "epoch {:>3}  train loss {:.4}  val loss {:.4}  val acc {:.4}  slope {:.4}",
            r.epoch, r.train_loss, r.val_loss, r.val_accuracy, r.slope.mean
        );
    })?;
    out.save(dir)?;
    let best = out.log.record(out.log.optimal_epoch);
    println!(
        "optimal epoch {}: val loss {:.4}, val accuracy {:.4}, mean slope {:.4} (initial {:.4})",
        best.epoch, best.val_loss, best.val_accuracy, best.slope.mean, out.log.initial.slope.mean
    );
    Ok(())
}

/// Rows of a CSV file of points; blank lines and lines starting with `#`
/// are skipped.
fn read_points(path: &Path, dim: usize) -> Result<Matrix> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split(',')
            .map(|v| v.trim().parse::<f64>())
            .collect::<Result<Vec<f64>, _>>()
            .with_context(|| format!("{}:{}: not a row of numbers", path.display(), i + 1))?;
        if row.len() != dim {
            return Err(anyhow!(
                "{}:{}: {} values but the network takes {dim} inputs",
                path.display(),
                i + 1,
                row.len()
            ));
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(anyhow!("{}: no points", path.display()));
    }
    Ok(Matrix::from_rows(&rows))
}

/// Dataset points in the network's input format, upsampling images when the
/// network was trained at a higher resolution.
fn dataset_points(cfg: &SlopeRunConfig, id: DatasetId, net: &Network) -> Result<Dataset> {
    if !id.is_image() {
        return Err(usage(
            "covtype points depend on the standardization of the training split; pass them with --points",
        ));
    }
    require_files(id, &cfg.data_dir)?;
    let files = id.files(&cfg.data_dir);
    let ds = load_idx(&files[0], &files[1])?;
    match (ds.shape, net.spec().input) {
        _ if ds.features.cols() == net.input_len() => Ok(ds),
        (InputShape::Image { height, width, .. }, InputShape::Image { height: h, width: w, .. })
            if h >= height && w >= width =>
        {
            Ok(bilinear_resize(&ds, h, w)?)
        }
        _ => Err(anyhow!(
            "{id} points have {} values but the network takes {} inputs",
            ds.features.cols(),
            net.input_len()
        )),
    }
}

pub fn slope(ctx: &Context, flags: &SlopeFlags) -> Result<()> {
    let cfg = resolve_slope(flags, ctx.config.as_deref())?;
    if ctx.printed(&cfg) {
        return Ok(());
    }
    let started = now();
    let net = load_checkpoint(&cfg.checkpoint).with_context(|| format!("loading {}", cfg.checkpoint.display()))?;
    let points = match (cfg.dataset, &cfg.points) {
        (Some(id), _) => dataset_points(&cfg, id, &net)?.features,
        (None, Some(path)) => read_points(path, net.input_len())?,
        (None, None) => unreachable!("resolve_slope requires a point source"),
    };
    let n = points.rows();
    let ids: Vec<usize> = if cfg.sample == 0 || cfg.sample >= n {
        (0..n).collect()
    } else {
        slope_sample_indices(n, cfg.sample, cfg.seed)
    };
    let selected = if ids.len() == n {
        points
    } else {
        let rows: Vec<Vec<f64>> = ids.iter().map(|&i| points.row(i).to_vec()).collect();
        Matrix::from_rows(&rows)
    };

    let staging = Staging::new(&cfg.output_dir)?;
    let mut manifest = ctx.manifest("slope", &cfg, Some(cfg.seed), started, &cfg.output_dir);
    let mut inputs = vec![cfg.checkpoint.clone()];
    inputs.extend(cfg.points.clone());
    manifest.inputs = checksums(Path::new(""), &inputs)?;
    let outcome = (|| -> Result<()> {
        let report = mean_slope_with_ids(&net, &selected, &ids, cfg.p)?;
        report.write(&staging.dir, "slopes")?;
        print_summary(&report);
        Ok(())
    })();
    finish(staging, manifest, "slope", outcome)
}

fn print_summary(report: &SlopeReport) {
    let s = &report.summary;
    println!("slope (p={}): mean {} ± {} over {} points", report.p, s.mean, s.std, s.n);
}

fn cell_names(cells: &Path) -> BTreeSet<String> {
    fs::read_dir(cells)
        .map(|rd| {
            rd.filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| !n.ends_with(".partial"))
                .collect()
        })
        .unwrap_or_default()
}

pub fn experiment(ctx: &Context, flags: &ExperimentFlags) -> Result<()> {
    let cfg = resolve_experiment(flags, ctx.config.as_deref())?;
    if ctx.printed(&cfg) {
        return Ok(());
    }
    for &d in &cfg.datasets {
        require_files(d, &cfg.data_dir)?;
    }
    let started = now();
    let out = cfg.output_dir.clone();
    let cells = out.join("cells");
    let existing = cell_names(&cells);
    let hash = cfg.hash();
    let mut manifest = ctx.manifest("experiment", &cfg, cfg.seeds.first().copied(), started, &out);
    let label = format!("{}-{}", cfg.experiment, &hash[..12]);
    match run_experiment(&cfg) {
        Ok(res) => {
            manifest.finished_at = now();
            let mut produced: Vec<PathBuf> = res.csvs.iter().map(|(name, _)| out.join(name)).collect();
            produced.push(out.join("configs").join(format!("{hash}.json")));
            produced.push(out.join("results.jsonl"));
            let mut reused = Vec::new();
            for key in &res.cells {
                let files = files_under(&cells.join(key))?;
                if existing.contains(key) {
                    reused.extend(files);
                } else {
                    produced.extend(files);
                }
            }
            manifest.artifacts = checksums(&out, &produced)?;
            manifest.inputs = checksums(&out, &reused)?;
            manifest.write(&out.join("manifests").join(format!("{label}.json")))?;
            for (name, _) in &res.csvs {
                println!("wrote {}", out.join(name).display());
            }
            println!("{} result records, config {}", res.records.len(), hash);
            Ok(())
        }
        Err(e) => {
            let e = anyhow::Error::from(e);
            let q = quarantine_dir(&out, &label);
            fs::create_dir_all(&q)?;
            if let Ok(rd) = fs::read_dir(&cells) {
                for entry in rd.filter_map(|e| e.ok()) {
                    let name = entry.file_name().to_string_lossy().into_owned();
                    if name.ends_with(".partial") {
                        fs::rename(entry.path(), q.join(&name))?;
                    }
                }
            }
            manifest.finished_at = now();
            manifest.status = RunStatus::Failed;
            manifest.error = Some(format!("{e:#}"));
            manifest.artifacts = checksums(&q, &files_under(&q)?)?;
            manifest.write(&q.join(MANIFEST_FILE))?;
            Err(anyhow!("{e:#} (partial outputs moved to {})", q.display()))
        }
    }
}

pub fn verify(ctx: &Context, flags: &VerifyFlags) -> Result<()> {
    let cfg = resolve_verify(flags, ctx.config.as_deref())?;
    if ctx.printed(&cfg) {
        return Ok(());
    }
    let started = now();
    let opts = VerifyOptions {
        quick: cfg.quick,
        seed: cfg.seed,
        fault: cfg.inject_fault.then_some(Fault::JacobianIgnoresMasks),
    };
    let staging = Staging::new(&cfg.output_dir)?;
    let manifest = ctx.manifest("verify", &cfg, Some(cfg.seed), started, &cfg.output_dir);
    let outcome = (|| -> Result<()> {
        let checks = run_checks(&opts)?;
        for c in &checks {
            println!(
                "{}  {:<40} measured {:.3e}  tolerance {:.1e}  {}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.tolerance,
                c.detail
            );
        }
        let body = serde_json::to_string_pretty(&checks)? + "\n";
        fs::write(staging.dir.join("verify.json"), body)?;
        let failed = checks.iter().filter(|c| !c.passed).count();
        if failed > 0 {
            return Err(anyhow!("{failed} of {} checks failed", checks.len()));
        }
        println!("all {} checks passed", checks.len());
        Ok(())
    })();
    finish(staging, manifest, "verify", outcome)
}
