//! Global-model checkpoints: a little-endian `FPRT` binary plus a JSON sidecar.
//!
//! The binary stores group names and flat values only; slot shapes come from
//! the model spec recorded in the sidecar.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model_zoo::{self, Model, ModelSpec};
use crate::params::ParamSet;

const MAGIC: &[u8; 4] = b"FPRT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Completed aggregations when the checkpoint was taken.
    pub round: usize,
    /// Hex SHA-256 of the canonical experiment config JSON.
    pub config_hash: String,
    pub model: ModelSpec,
}

/// Sidecar path: the checkpoint path with `.json` appended.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn encode(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + params.param_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.groups.len() as u32).to_le_bytes());
    for g in &params.groups {
        out.extend_from_slice(&(g.name.len() as u16).to_le_bytes());
        out.extend_from_slice(g.name.as_bytes());
        out.extend_from_slice(&(g.param_count() as u64).to_le_bytes());
        for v in g.flatten() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Decodes `bytes` into the structure of `template`, checking names and counts.
pub fn decode(bytes: &[u8], template: &ParamSet) -> Result<ParamSet> {
    let mut at = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = at
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or(Error::Truncated { what: "checkpoint" })?;
        let s = &bytes[at..end];
        at = end;
        Ok(s)
    };
    if take(4)? != MAGIC {
        return Err(Error::BadMagic {
            what: "checkpoint",
            expected: "FPRT",
        });
    }
    let version = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::UnsupportedVersion {
            what: "checkpoint",
            version,
        });
    }
    let count = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
    if count != template.groups.len() {
        return Err(Error::Structure(format!(
            "checkpoint has {count} groups, model has {}",
            template.groups.len()
        )));
    }
    let mut values = Vec::with_capacity(template.param_count());
    for g in &template.groups {
        let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
        let name = String::from_utf8(take(len)?.to_vec())
            .map_err(|_| Error::Format("checkpoint group name is not UTF-8".into()))?;
        if name != g.name {
            return Err(Error::Structure(format!(
                "checkpoint group {name} where the model has {}",
                g.name
            )));
        }
        let n = u64::from_le_bytes(take(8)?.try_into().expect("8 bytes")) as usize;
        if n != g.param_count() {
            return Err(Error::Structure(format!(
                "checkpoint group {name} holds {n} values, model expects {}",
                g.param_count()
            )));
        }
        let raw = take(n.checked_mul(8).ok_or(Error::Truncated { what: "checkpoint" })?)?;
        values.extend(
            raw.chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))),
        );
    }
    if at != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - at
        )));
    }
    template.unflatten_like(&values)
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &ParamSet, meta: &CheckpointMeta) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(params)).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_string_pretty(meta)?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn read_checkpoint_meta(path: impl AsRef<Path>) -> Result<CheckpointMeta> {
    let side = sidecar_path(path.as_ref());
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Rebuilds the model named in the sidecar and loads the stored parameters into it.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(Model, CheckpointMeta)> {
    let path = path.as_ref();
    let meta = read_checkpoint_meta(path)?;
    let mut model = model_zoo::build(&meta.model, 0)?;
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    model.params = decode(&bytes, &model.params)?;
    Ok((model, meta))
}
