//! Checkpoint files.
//!
//! Layout: the magic `SMRC1`, a little-endian `u64` manifest length, the
//! TOML manifest, the payload of little-endian `f32` tensors, and a trailing
//! little-endian xxh3-64 of every byte before it.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use xxhash_rust::xxh3::xxh3_64;

use super::adam::Adam;
use super::config::TrainConfig;
use super::schedule::{EarlyStopper, PlateauScheduler};
use super::trainer::{EpochRecord, Phase, TrainState};
use crate::error::{Result, SmarcError};
use crate::model::{ArchConfig, SmarcModel};
use crate::params::ParamId;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"SMRC1";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum TensorKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    kind: TensorKind,
    shape: Vec<usize>,
    /// Byte offset into the payload.
    offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StateRecord {
    epoch: usize,
    phase: Phase,
    lr: f64,
    adam_beta1: f64,
    adam_beta2: f64,
    adam_eps: f64,
    adam_t: u64,
    plateau: PlateauScheduler,
    stopper: EarlyStopper,
    history: Vec<EpochRecord>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    arch: ArchConfig,
    train: Option<TrainConfig>,
    state: Option<StateRecord>,
    tensors: Vec<TensorEntry>,
}

/// A decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: SmarcModel<f32>,
    pub train: Option<TrainConfig>,
    pub state: Option<TrainState>,
}

fn ckpt_err(path: &Path, reason: impl Into<String>) -> SmarcError {
    SmarcError::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Serialise to bytes; see the module docs for the layout.
pub fn encode_checkpoint(model: &SmarcModel<f32>, train: Option<&TrainConfig>, state: Option<&TrainState>) -> Vec<u8> {
    let mut payload: Vec<u8> = Vec::with_capacity(model.param_count() * 4);
    let mut tensors = Vec::new();
    let mut push = |name: &str, kind, shape: &[usize], data: &[f32], payload: &mut Vec<u8>| {
        tensors.push(TensorEntry {
            name: name.to_string(),
            kind,
            shape: shape.to_vec(),
            offset: payload.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };
    for (_, p) in model.params.iter() {
        push(&p.name, TensorKind::Param, p.tensor.shape(), p.tensor.data(), &mut payload);
    }
    if let Some(s) = state {
        for (kind, bufs) in [(TensorKind::AdamM, &s.adam.m), (TensorKind::AdamV, &s.adam.v)] {
            for ((_, p), buf) in model.params.iter().zip(bufs) {
                push(&p.name, kind, p.tensor.shape(), buf, &mut payload);
            }
        }
    }
    let manifest = Manifest {
        format: FORMAT_VERSION,
        arch: model.cfg.clone(),
        train: train.cloned(),
        state: state.map(|s| StateRecord {
            epoch: s.epoch,
            phase: s.phase,
            lr: s.lr,
            adam_beta1: s.adam.beta1,
            adam_beta2: s.adam.beta2,
            adam_eps: s.adam.eps,
            adam_t: s.adam.t,
            plateau: s.plateau.clone(),
            stopper: s.stopper.clone(),
            history: s.history.clone(),
        }),
        tensors,
    };
    let text = toml::to_string(&manifest).expect("manifest serialises");

    let mut out = Vec::with_capacity(MAGIC.len() + 8 + text.len() + payload.len() + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&payload);
    let sum = xxh3_64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Write atomically (temporary file, then rename) so an interrupted save
/// never clobbers the previous checkpoint.
pub fn save_checkpoint(
    path: &Path,
    model: &SmarcModel<f32>,
    train: Option<&TrainConfig>,
    state: Option<&TrainState>,
) -> Result<()> {
    let bytes = encode_checkpoint(model, train, state);
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, &bytes).map_err(|e| SmarcError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| SmarcError::io(path, e))
}

struct Decoded<'a> {
    manifest: Manifest,
    payload: &'a [u8],
}

fn decode<'a>(path: &Path, bytes: &'a [u8]) -> Result<Decoded<'a>> {
    let header = MAGIC.len() + 8;
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(ckpt_err(path, "unknown magic, not a checkpoint file"));
    }
    if bytes.len() < header + 8 {
        return Err(ckpt_err(path, "file truncated"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if xxh3_64(body) != stored {
        return Err(ckpt_err(path, "checksum mismatch (file truncated or corrupted)"));
    }
    let len = u64::from_le_bytes(body[MAGIC.len()..header].try_into().expect("8 bytes")) as usize;
    if header + len > body.len() {
        return Err(ckpt_err(path, "manifest length exceeds file size"));
    }
    let text = std::str::from_utf8(&body[header..header + len]).map_err(|_| ckpt_err(path, "manifest is not UTF-8"))?;
    let manifest: Manifest = toml::from_str(text).map_err(|e| ckpt_err(path, format!("manifest: {}", e.message())))?;
    if manifest.format != FORMAT_VERSION {
        return Err(ckpt_err(path, format!("unsupported format version {}", manifest.format)));
    }
    Ok(Decoded {
        manifest,
        payload: &body[header + len..],
    })
}

fn read_floats(path: &Path, payload: &[u8], e: &TensorEntry) -> Result<Vec<f32>> {
    let n: usize = e.shape.iter().product();
    let start = e.offset as usize;
    let end = start + 4 * n;
    if end > payload.len() {
        return Err(ckpt_err(path, format!("tensor {} extends past the payload", e.name)));
    }
    Ok(payload[start..end]
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect())
}

/// Copy the `kind` tensors of the manifest into buffers matching `model`,
/// failing on the first parameter whose name or shape disagrees.
fn gather(path: &Path, d: &Decoded<'_>, model: &SmarcModel<f32>, kind: TensorKind) -> Result<Vec<Vec<f32>>> {
    let entries: Vec<&TensorEntry> = d.manifest.tensors.iter().filter(|e| e.kind == kind).collect();
    let mut out = Vec::with_capacity(model.params.len());
    for (_, p) in model.params.iter() {
        let e = entries
            .iter()
            .find(|e| e.name == p.name)
            .ok_or_else(|| ckpt_err(path, format!("parameter {} missing from checkpoint", p.name)))?;
        if e.shape != p.tensor.shape() {
            return Err(ckpt_err(
                path,
                format!("shape mismatch for parameter {}: checkpoint {:?}, model {:?}", p.name, e.shape, p.tensor.shape()),
            ));
        }
        out.push(read_floats(path, d.payload, e)?);
    }
    if let Some(extra) = entries.iter().find(|e| model.params.id(&e.name).is_none()) {
        return Err(ckpt_err(path, format!("checkpoint parameter {} not present in the model", extra.name)));
    }
    Ok(out)
}

fn set_params(model: &mut SmarcModel<f32>, values: Vec<Vec<f32>>) -> Result<()> {
    for (i, v) in values.into_iter().enumerate() {
        let p = model.params.get_mut(ParamId(i));
        p.tensor = Tensor::new(p.tensor.shape(), v)?;
    }
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| SmarcError::io(path, e))
}

/// Load model, training config and trainer state.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = read(path)?;
    let d = decode(path, &bytes)?;
    let mut model = SmarcModel::<f32>::build(d.manifest.arch.clone(), 0)
        .map_err(|e| ckpt_err(path, format!("architecture: {e}")))?;
    let params = gather(path, &d, &model, TensorKind::Param)?;
    set_params(&mut model, params)?;

    let state = match &d.manifest.state {
        None => None,
        Some(s) => Some(TrainState {
            epoch: s.epoch,
            phase: s.phase,
            lr: s.lr,
            adam: Adam {
                beta1: s.adam_beta1,
                beta2: s.adam_beta2,
                eps: s.adam_eps,
                t: s.adam_t,
                m: gather(path, &d, &model, TensorKind::AdamM)?,
                v: gather(path, &d, &model, TensorKind::AdamV)?,
            },
            plateau: s.plateau.clone(),
            stopper: s.stopper.clone(),
            history: s.history.clone(),
        }),
    };
    Ok(Checkpoint {
        model,
        train: d.manifest.train.clone(),
        state,
    })
}

/// Load only the weights into an already-built model, which must have the
/// same parameter names and shapes.
pub fn load_weights_into(model: &mut SmarcModel<f32>, path: &Path) -> Result<()> {
    let bytes = read(path)?;
    let d = decode(path, &bytes)?;
    let params = gather(path, &d, model, TensorKind::Param)?;
    set_params(model, params)
}
