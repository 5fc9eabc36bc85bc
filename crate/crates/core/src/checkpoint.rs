//! Checkpoint container.
//!
//! A checkpoint is a directory holding `manifest.json` plus raw little-endian `f32` tensor
//! files in row-major order. The manifest maps every tensor name to its shape, dtype, file and
//! byte offset, and records the stage, step, latent normalization constant and the rendered
//! config. Optimizer moments are stored as `optim.m/<param>` and `optim.v/<param>`.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::trainer::{ModelState, Moments, Stage};

pub const FORMAT_VERSION: u32 = 1;
const PARAMS_FILE: &str = "params.bin";
const OPTIM_FILE: &str = "optim.bin";
const M_PREFIX: &str = "optim.m/";
const V_PREFIX: &str = "optim.v/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub file: String,
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub stage: Stage,
    pub step: u64,
    pub normalization: f64,
    pub config: String,
    pub tensors: BTreeMap<String, TensorEntry>,
}

fn f32_bytes(t: &Tensor, out: &mut Vec<u8>) -> Result<()> {
    for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

/// Serializes `state` into a manifest and its tensor files (`file name -> bytes`).
pub fn encode(state: &ModelState) -> Result<(Manifest, BTreeMap<String, Vec<u8>>)> {
    if state.params.dtype() != DType::F32 {
        return Err(Error::Checkpoint("only f32 parameter stores can be checkpointed".into()));
    }
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    let mut tensors = BTreeMap::new();
    let mut push = |name: String, file: &str, t: &Tensor| -> Result<()> {
        let buf = files.entry(file.to_string()).or_default();
        let offset = buf.len() as u64;
        f32_bytes(t, buf)?;
        tensors.insert(name, TensorEntry { shape: t.dims().to_vec(), dtype: "f32".into(), file: file.into(), offset });
        Ok(())
    };
    for (name, var) in state.params.entries() {
        push(name, PARAMS_FILE, var.as_tensor())?;
    }
    for (name, m) in &state.optimizer {
        push(format!("{M_PREFIX}{name}"), OPTIM_FILE, &m.m)?;
        push(format!("{V_PREFIX}{name}"), OPTIM_FILE, &m.v)?;
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        stage: state.stage,
        step: state.step,
        normalization: state.normalization,
        config: state.config.render(),
        tensors,
    };
    Ok((manifest, files))
}

pub fn save_checkpoint(state: &ModelState, dir: &Path) -> Result<()> {
    let (manifest, files) = encode(state)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, bytes) in &files {
        let p = dir.join(name);
        std::fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
    }
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

fn decode_tensor(name: &str, entry: &TensorEntry, bytes: &[u8]) -> Result<Tensor> {
    if entry.dtype != "f32" {
        return Err(Error::Checkpoint(format!("{name}: unsupported dtype {:?}", entry.dtype)));
    }
    let count = entry
        .shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
    let len = count.checked_mul(4).ok_or_else(|| Error::Checkpoint(format!("{name}: shape overflows")))?;
    let start = usize::try_from(entry.offset).map_err(|_| Error::Checkpoint(format!("{name}: offset too large")))?;
    let end = start.checked_add(len).ok_or_else(|| Error::Checkpoint(format!("{name}: offset overflows")))?;
    let raw = bytes.get(start..end).ok_or_else(|| {
        Error::Checkpoint(format!(
            "{name}: bytes {start}..{end} beyond end of {} ({} bytes); file truncated?",
            entry.file,
            bytes.len()
        ))
    })?;
    let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(Tensor::from_vec(data, entry.shape.as_slice(), &Device::Cpu)?)
}

fn plain_file_name(name: &str) -> bool {
    !name.is_empty() && name != "." && name != ".." && !name.contains(['/', '\\'])
}

/// Rebuilds a state from manifest bytes, fetching tensor files through `read_file`.
///
/// The tensor set must match exactly what the recorded config builds.
pub fn decode(manifest: &[u8], read_file: &mut dyn FnMut(&str) -> Result<Vec<u8>>) -> Result<ModelState> {
    let manifest: Manifest = serde_json::from_slice(manifest)?;
    if manifest.format != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {}", manifest.format)));
    }
    if !manifest.normalization.is_finite() || manifest.normalization <= 0.0 {
        return Err(Error::Checkpoint(format!("invalid normalization constant {}", manifest.normalization)));
    }
    let config = Config::parse_str(&manifest.config)?;
    let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
    for entry in manifest.tensors.values() {
        if !plain_file_name(&entry.file) {
            return Err(Error::Checkpoint(format!("tensor file name {:?} is not a plain file name", entry.file)));
        }
        if !files.contains_key(&entry.file) {
            files.insert(entry.file.clone(), read_file(&entry.file)?);
        }
    }

    let mut state = ModelState::new(config)?;
    state.stage = manifest.stage;
    state.step = manifest.step;
    state.normalization = manifest.normalization;

    let expected: BTreeMap<String, Vec<usize>> =
        state.params.entries().into_iter().map(|(n, v)| (n, v.dims().to_vec())).collect();
    let mut moments: BTreeMap<String, (Option<Tensor>, Option<Tensor>)> = BTreeMap::new();
    let mut seen = 0usize;
    for (name, entry) in &manifest.tensors {
        let t = decode_tensor(name, entry, &files[&entry.file])?;
        let (param, slot) = if let Some(p) = name.strip_prefix(M_PREFIX) {
            (p, Some(0))
        } else if let Some(p) = name.strip_prefix(V_PREFIX) {
            (p, Some(1))
        } else {
            (name.as_str(), None)
        };
        let shape = expected.get(param).ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
        if shape != &entry.shape {
            return Err(Error::Checkpoint(format!("{name}: shape {:?}, config expects {shape:?}", entry.shape)));
        }
        match slot {
            None => {
                state.params.insert(name, t)?;
                seen += 1;
            }
            Some(i) => {
                let e = moments.entry(param.to_string()).or_default();
                if i == 0 {
                    e.0 = Some(t)
                } else {
                    e.1 = Some(t)
                }
            }
        }
    }
    if seen != expected.len() {
        let missing: Vec<_> = expected.keys().filter(|k| !manifest.tensors.contains_key(*k)).take(3).collect();
        return Err(Error::Checkpoint(format!(
            "checkpoint lacks {} parameters, e.g. {missing:?}",
            expected.len() - seen
        )));
    }
    for (name, (m, v)) in moments {
        match (m, v) {
            (Some(m), Some(v)) => {
                state.optimizer.insert(name, Moments { m, v });
            }
            _ => return Err(Error::Checkpoint(format!("{name}: optimizer moments incomplete"))),
        }
    }
    Ok(state)
}

pub fn load_checkpoint(dir: &Path) -> Result<ModelState> {
    let mpath = dir.join("manifest.json");
    let manifest = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    decode(&manifest, &mut |file| {
        let p = dir.join(file);
        std::fs::read(&p).map_err(|e| Error::io(&p, e))
    })
}
