//! Ensemble checkpoint container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset | size | content                                   |
//! |--------|------|-------------------------------------------|
//! | 0      | 8    | magic `KDSSLCK\0`                         |
//! | 8      | 4    | format version (`u32`)                    |
//! | 12     | 8    | metadata length `L` in bytes (`u64`)      |
//! | 20     | L    | UTF-8 JSON metadata                       |
//! | 20 + L | …    | parameters as `f64`, member by member     |
//!
//! The metadata lists each member's model spec, seed and tensors (name
//! and shape) in storage order; the parameter section holds exactly
//! `Σ param_count × 8` bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EvalReport, TrainConfig};
use crate::augment::Normalizer;
use crate::ensemble::EnsembleState;
use crate::error::{Error, Result};
use crate::model::{ClassifierModel, ModelSpec};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"KDSSLCK\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Training context stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointContext {
    pub config: TrainConfig,
    pub normalizer: Option<Normalizer>,
    pub iteration: usize,
    pub epoch: Option<usize>,
    pub validation: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MemberMeta {
    seed: u64,
    spec: ModelSpec,
    param_count: usize,
    tensors: Vec<TensorMeta>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    context: CheckpointContext,
    members: Vec<MemberMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub context: CheckpointContext,
    pub ensemble: EnsembleState,
}

fn tensor_meta(model: &ClassifierModel) -> Vec<TensorMeta> {
    model
        .tensors()
        .into_iter()
        .map(|t| TensorMeta {
            name: t.name,
            shape: t.shape,
        })
        .collect()
}

pub fn encode_checkpoint(ensemble: &EnsembleState, context: &CheckpointContext) -> Result<Vec<u8>> {
    let meta = Metadata {
        format_version: CHECKPOINT_VERSION,
        context: context.clone(),
        members: ensemble
            .members()
            .iter()
            .zip(ensemble.seeds())
            .map(|(m, &seed)| MemberMeta {
                seed,
                spec: m.spec().clone(),
                param_count: m.param_count(),
                tensors: tensor_meta(m),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&meta)?;
    let n_params: usize = ensemble.members().iter().map(ClassifierModel::param_count).sum();
    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + 8 * n_params);
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for m in ensemble.members() {
        for v in m.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8], source: &str) -> Result<Checkpoint> {
    let err = |at: String, msg: &str| Error::parse(source, at, msg);
    if bytes.len() < HEADER_LEN {
        return Err(err("byte 0".into(), "file shorter than checkpoint header"));
    }
    if bytes[..8] != CHECKPOINT_MAGIC {
        return Err(err("byte 0".into(), "not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "{source}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let json_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() < json_len {
        return Err(err(format!("byte {HEADER_LEN}"), "truncated metadata"));
    }
    let meta: Metadata = serde_json::from_slice(&body[..json_len])
        .map_err(|e| err(format!("byte {HEADER_LEN}"), &format!("metadata: {e}")))?;
    if meta.format_version != version {
        return Err(Error::Incompatible(format!(
            "{source}: header version {version} but metadata version {}",
            meta.format_version
        )));
    }
    let mut data = &body[json_len..];
    let expected: usize = meta.members.iter().map(|m| m.param_count * 8).sum();
    if data.len() != expected {
        return Err(err(
            format!("byte {}", HEADER_LEN + json_len),
            &format!("parameter section has {} bytes, expected {expected}", data.len()),
        ));
    }
    let mut members = Vec::with_capacity(meta.members.len());
    let mut seeds = Vec::with_capacity(meta.members.len());
    for mm in meta.members {
        let (chunk, rest) = data.split_at(mm.param_count * 8);
        data = rest;
        let params = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let model = ClassifierModel::from_params(mm.spec, params)?;
        if tensor_meta(&model) != mm.tensors {
            return Err(Error::Incompatible(format!(
                "{source}: tensor layout does not match model spec"
            )));
        }
        members.push(model);
        seeds.push(mm.seed);
    }
    Ok(Checkpoint {
        context: meta.context,
        ensemble: EnsembleState::from_members(members, seeds)?,
    })
}

pub fn save_checkpoint(ensemble: &EnsembleState, context: &CheckpointContext, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(ensemble, context)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path)?;
    decode_checkpoint(&bytes, &path.display().to_string())
}
