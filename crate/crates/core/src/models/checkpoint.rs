//! Checkpoint persistence.
//!
//! A checkpoint is two files: a binary blob holding the parameter arrays
//! and a JSON sidecar (`<blob>.json`) holding the spec and run metadata.
//!
//! Blob layout, all integers little-endian:
//!
//! ```text
//! magic  b"ADVMKCKP"
//! u32    format version
//! u32    array count
//! repeat:
//!   u32 name length, name bytes (UTF-8)
//!   u8  dtype (0 = f32, 1 = f64)
//!   u32 rank, u64 x rank dims
//!   raw element bytes
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::{NetworkKind, NetworkSpec, ParameterSet};
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"ADVMKCKP";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub config_digest: String,
    /// Free-form run annotations (training regime, assumptions).
    #[serde(default)]
    pub notes: BTreeMap<String, serde_json::Value>,
}

impl CheckpointMeta {
    pub fn new(epoch: usize, seed: u64, config_digest: impl Into<String>) -> Self {
        Self {
            epoch,
            seed,
            config_digest: config_digest.into(),
            notes: BTreeMap::new(),
        }
    }

    pub fn with_note(mut self, key: &str, value: impl Into<serde_json::Value>) -> Self {
        self.notes.insert(key.to_string(), value.into());
        self
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParameterSet,
    pub meta: CheckpointMeta,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    format_version: u32,
    kind: NetworkKind,
    spec: NetworkSpec,
    epoch: usize,
    seed: u64,
    config_digest: String,
    #[serde(default)]
    notes: BTreeMap<String, serde_json::Value>,
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => flat
            .to_vec1::<f64>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        _ => flat
            .to_dtype(DType::F32)?
            .to_vec1::<f32>()?
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    })
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Checkpoint {
    /// Writes the blob to `path` and the sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut blob = Vec::new();
        blob.extend_from_slice(MAGIC);
        blob.extend(CHECKPOINT_FORMAT_VERSION.to_le_bytes());
        blob.extend((self.params.len() as u32).to_le_bytes());
        for (name, var) in self.params.iter() {
            blob.extend((name.len() as u32).to_le_bytes());
            blob.extend_from_slice(name.as_bytes());
            blob.push(match var.dtype() {
                DType::F64 => 1,
                _ => 0,
            });
            blob.extend((var.rank() as u32).to_le_bytes());
            for &d in var.dims() {
                blob.extend((d as u64).to_le_bytes());
            }
            blob.extend(tensor_bytes(var.as_tensor())?);
        }
        fs::write(path, blob).map_err(|e| Error::io(path, e))?;

        let sidecar = Sidecar {
            format_version: CHECKPOINT_FORMAT_VERSION,
            kind: self.spec.kind,
            spec: self.spec.clone(),
            epoch: self.meta.epoch,
            seed: self.meta.seed,
            config_digest: self.meta.config_digest.clone(),
            notes: self.meta.notes.clone(),
        };
        let side = sidecar_path(path);
        fs::write(&side, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar_path(path);
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text)
            .map_err(|e| Error::VersionMismatch(format!("unreadable metadata {}: {e}", side.display())))?;
        if sidecar.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::VersionMismatch(format!(
                "metadata format {} (expected {CHECKPOINT_FORMAT_VERSION})",
                sidecar.format_version
            )));
        }
        if sidecar.kind != sidecar.spec.kind {
            return Err(Error::IncompatibleCheckpoint(
                "metadata kind disagrees with spec".into(),
            ));
        }
        let blob = fs::read(path).map_err(|e| Error::io(path, e))?;
        let params = decode_blob(&blob)?;
        params.check_against(&sidecar.spec)?;
        Ok(Checkpoint {
            spec: sidecar.spec,
            params,
            meta: CheckpointMeta {
                epoch: sidecar.epoch,
                seed: sidecar.seed,
                config_digest: sidecar.config_digest,
                notes: sidecar.notes,
            },
        })
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::IncompatibleCheckpoint("truncated parameter blob".into())
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn decode_blob(blob: &[u8]) -> Result<ParameterSet> {
    if blob.len() < 12 || &blob[..8] != MAGIC {
        return Err(Error::VersionMismatch("bad checkpoint header".into()));
    }
    let mut r = Reader { buf: blob, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "blob format {version} (expected {CHECKPOINT_FORMAT_VERSION})"
        )));
    }
    let count = r.u32()?;
    let mut vars = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::IncompatibleCheckpoint("non-UTF-8 parameter name".into()))?;
        let dtype = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let t = match dtype {
            0 => {
                let v: Vec<f32> = r
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
            }
            1 => {
                let v: Vec<f64> = r
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, dims.as_slice(), &Device::Cpu)?
            }
            other => {
                return Err(Error::IncompatibleCheckpoint(format!("unknown dtype tag {other}")))
            }
        };
        vars.insert(name, Var::from_tensor(&t)?);
    }
    if r.pos != blob.len() {
        return Err(Error::IncompatibleCheckpoint("trailing bytes in parameter blob".into()));
    }
    Ok(ParameterSet::from_vars(vars))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
