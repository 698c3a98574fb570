//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "SLOPENET"
//! version  u32      currently 1
//! hlen     u64      length of the JSON header
//! header   hlen     {"spec": NetworkSpec, "seed": u64, "n_params": u64}
//! params   n_params * f64 (IEEE-754 little-endian), layer by layer,
//!          weights (row-major) then biases
//! ```
//!
//! Parameters are stored bit-exactly, so save -> load -> save reproduces the
//! file byte for byte.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Network, NetworkSpec, NnError, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SLOPENET";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    seed: u64,
    n_params: u64,
}

impl Network {
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let params = self.flat_params();
        let header = Header {
            spec: self.spec().clone(),
            seed: self.seed(),
            n_params: params.len() as u64,
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + header.len() + 8 * params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Network> {
        let err = |m: &str| NnError::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(err("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| err("truncated header"))?;
        let header: Header =
            serde_json::from_slice(body).map_err(|e| NnError::Checkpoint(format!("header: {e}")))?;
        let expected = header.spec.parameter_count();
        if header.n_params as usize != expected {
            return Err(NnError::Checkpoint(format!(
                "header declares {} parameters, spec implies {expected}",
                header.n_params
            )));
        }
        let raw = &bytes[20 + hlen..];
        if raw.len() != 8 * expected {
            return Err(NnError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                8 * expected,
                raw.len()
            )));
        }
        let params: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut net = Network::init(&header.spec, header.seed)?;
        net.set_flat_params(&params)?;
        if !net.is_finite() {
            return Err(err("non-finite parameters"));
        }
        Ok(net)
    }
}

/// Writes via a temporary sibling file and rename.
pub fn save_checkpoint(net: &Network, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&net.to_checkpoint_bytes())?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Network> {
    Network::from_checkpoint_bytes(&fs::read(path)?)
}
