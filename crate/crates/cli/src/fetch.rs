use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::PathBuf;

use anyhow::{anyhow, Context as _, Result};
use flate2::read::GzDecoder;
use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use slope_core::data::{data_root, DatasetId};

use crate::commands::Context;
use crate::config::usage;
use crate::manifest::{checksums, now, RunStatus, Staging, MANIFEST_FILE};

pub const MNIST_URL: &str = "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz";
pub const MNIST_TARBALL_SHA256: &str = "8f87f2d0d9133e6c9f7012d6d26bb05409e7e870a1de21d1a600b8d400cc07ed";

/// Uncompressed IDX files inside the tarball, under `package/data/`.
pub const MNIST_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db"),
    ("train-labels-idx1-ubyte", "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5"),
    ("t10k-images-idx3-ubyte", "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7"),
    ("t10k-labels-idx1-ubyte", "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2"),
];

#[derive(Debug, Clone, clap::Args)]
pub struct FetchFlags {
    #[arg(long, default_value = "mnist")]
    pub dataset: DatasetId,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    /// Local copy of the archive instead of downloading it.
    #[arg(long)]
    pub from: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FetchConfig {
    pub dataset: DatasetId,
    pub data_dir: PathBuf,
    pub source: String,
}

fn hex_sha256(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn download(url: &str) -> Result<Vec<u8>> {
    info!("downloading {url}");
    let resp = ureq::get(url).call().with_context(|| format!("downloading {url}"))?;
    let mut bytes = Vec::new();
    resp.into_reader().read_to_end(&mut bytes)?;
    Ok(bytes)
}

/// Extracted and checksummed MNIST files, keyed by file name.
fn unpack_mnist(tarball: &[u8], source: &str) -> Result<BTreeMap<&'static str, Vec<u8>>> {
    let got = hex_sha256(tarball);
    if got != MNIST_TARBALL_SHA256 {
        return Err(anyhow!(
            "checksum mismatch for {source}: expected {MNIST_TARBALL_SHA256}, got {got}"
        ));
    }
    let mut files = BTreeMap::new();
    let mut archive = tar::Archive::new(GzDecoder::new(tarball));
    for entry in archive.entries()? {
        let mut entry = entry?;
        let path = entry.path()?.into_owned();
        let Some(&(name, sha)) = MNIST_FILES
            .iter()
            .find(|(name, _)| path == std::path::Path::new("package/data").join(name))
        else {
            continue;
        };
        let mut bytes = Vec::new();
        entry.read_to_end(&mut bytes)?;
        let got = hex_sha256(&bytes);
        if got != sha {
            return Err(anyhow!("checksum mismatch for {name} in {source}: expected {sha}, got {got}"));
        }
        files.insert(name, bytes);
    }
    for (name, _) in MNIST_FILES {
        if !files.contains_key(name) {
            return Err(anyhow!("{source} has no package/data/{name}"));
        }
    }
    Ok(files)
}

pub fn fetch_data(ctx: &Context, flags: &FetchFlags) -> Result<()> {
    let cfg = FetchConfig {
        dataset: flags.dataset,
        data_dir: flags.data_dir.clone().unwrap_or_else(data_root),
        source: flags
            .from
            .as_ref()
            .map_or_else(|| MNIST_URL.to_string(), |p| p.display().to_string()),
    };
    if ctx.print_config {
        print!("{}", crate::config::to_toml(&cfg));
        return Ok(());
    }
    if cfg.dataset != DatasetId::Mnist {
        let expected: Vec<String> = cfg.dataset.files(&cfg.data_dir).iter().map(|p| p.display().to_string()).collect();
        return Err(usage(format!(
            "no verified download source for {}; place the files at {}",
            cfg.dataset,
            expected.join(", ")
        )));
    }
    let started = now();
    let tarball = match &flags.from {
        Some(p) => fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        None => download(MNIST_URL)?,
    };
    let files = unpack_mnist(&tarball, &cfg.source)?;

    let dir = cfg.data_dir.join(cfg.dataset.name());
    let staging = Staging::new(&dir)?;
    for (name, bytes) in &files {
        fs::write(staging.dir.join(name), bytes)?;
    }
    let mut manifest = ctx.manifest("fetch-data", &cfg, None, started, &dir);
    manifest.inputs.insert(cfg.source.clone(), MNIST_TARBALL_SHA256.to_string());
    let placed = staging.commit()?;
    manifest.artifacts = checksums(&dir, &placed)?;
    manifest.finished_at = now();
    manifest.status = RunStatus::Ok;
    manifest.write(&dir.join(MANIFEST_FILE))?;
    println!("{} files verified and written to {}", placed.len(), dir.display());
    Ok(())
}
