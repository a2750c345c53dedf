//! Checkpoint files: a JSON manifest (`<stem>.json`) describing each tensor
//! and a payload (`<stem>.bin`) of concatenated little-endian `f64` values.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Location, Result};
use crate::model::{EncoderParams, Linear, Params, PrototypeHead};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
    pub byte_len: u64,
}

/// `(<stem>.json, <stem>.bin)`. A trailing `.json` or `.bin` on `stem` is
/// ignored.
pub fn checkpoint_paths(stem: &Path) -> (PathBuf, PathBuf) {
    let base = match stem.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => stem.with_extension(""),
        _ => stem.to_path_buf(),
    };
    let with = |ext: &str| {
        let mut s = base.clone().into_os_string();
        s.push(ext);
        PathBuf::from(s)
    };
    (with(".json"), with(".bin"))
}

pub fn encode(params: &Params) -> (Manifest, Vec<u8>) {
    let mut payload = Vec::with_capacity(params.num_params() * 8);
    let mut tensors = Vec::new();
    for (name, t) in params.named_tensors() {
        let offset = payload.len() as u64;
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            byte_offset: offset,
            byte_len: payload.len() as u64 - offset,
        });
    }
    (
        Manifest {
            version: CHECKPOINT_VERSION,
            tensors,
        },
        payload,
    )
}

pub fn save_checkpoint(params: &Params, stem: &Path) -> Result<()> {
    let (json_path, bin_path) = checkpoint_paths(stem);
    if let Some(dir) = json_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let (manifest, payload) = encode(params);
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(json_path, text)?;
    fs::write(bin_path, payload)?;
    Ok(())
}

pub fn load_checkpoint(stem: &Path) -> Result<Params> {
    let (json_path, bin_path) = checkpoint_paths(stem);
    let text = fs::read_to_string(json_path)?;
    let payload = fs::read(bin_path)?;
    decode(&text, &payload)
}

fn json_offset(text: &str, err: &serde_json::Error) -> u64 {
    let line = err.line().max(1);
    let prior: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (prior + err.column().saturating_sub(1)) as u64
}

pub fn decode(manifest_text: &str, payload: &[u8]) -> Result<Params> {
    let manifest: Manifest = serde_json::from_str(manifest_text).map_err(|e| Error::Parse {
        location: Location::ByteOffset(json_offset(manifest_text, &e)),
        msg: format!("manifest: {e}"),
    })?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Parse {
            location: Location::ByteOffset(0),
            msg: format!("unsupported checkpoint version {}", manifest.version),
        });
    }

    let mut expected_offset = 0u64;
    let mut tensors = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let bad = |msg: String| Error::Parse {
            location: Location::ByteOffset(entry.byte_offset),
            msg: format!("tensor {}: {msg}", entry.name),
        };
        let numel: usize = entry.shape.iter().product();
        if entry.shape.is_empty() || numel == 0 {
            return Err(bad(format!("invalid shape {:?}", entry.shape)));
        }
        if entry.byte_len != numel as u64 * 8 {
            return Err(bad(format!(
                "byte_len {} does not match shape {:?}",
                entry.byte_len, entry.shape
            )));
        }
        if entry.byte_offset != expected_offset {
            return Err(bad(format!("expected byte_offset {expected_offset}")));
        }
        let end = entry.byte_offset + entry.byte_len;
        if end > payload.len() as u64 {
            return Err(Error::Parse {
                location: Location::ByteOffset(payload.len() as u64),
                msg: format!("payload truncated inside tensor {}", entry.name),
            });
        }
        let bytes = &payload[entry.byte_offset as usize..end as usize];
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
        expected_offset = end;
    }
    if expected_offset != payload.len() as u64 {
        return Err(Error::Parse {
            location: Location::ByteOffset(expected_offset),
            msg: format!(
                "{} trailing payload bytes",
                payload.len() as u64 - expected_offset
            ),
        });
    }
    assemble(tensors)
}

fn assemble(tensors: Vec<(String, Tensor)>) -> Result<Params> {
    let parse_err = |msg: String| Error::Parse {
        location: Location::ByteOffset(0),
        msg,
    };
    let mut iter = tensors.into_iter().peekable();
    let mut layers = Vec::new();
    while let Some((name, _)) = iter.peek() {
        if name == "head.prototypes" {
            break;
        }
        let i = layers.len();
        let (wn, weight) = iter.next().unwrap();
        let (bn, bias) = iter
            .next()
            .ok_or_else(|| parse_err(format!("missing bias after {wn}")))?;
        if wn != format!("encoder.{i}.weight") || bn != format!("encoder.{i}.bias") {
            return Err(parse_err(format!("unexpected tensor names {wn}, {bn}")));
        }
        layers.push(Linear { weight, bias });
    }
    let (_, prototypes) = iter
        .next()
        .ok_or_else(|| parse_err("missing head.prototypes".into()))?;
    if let Some((name, _)) = iter.next() {
        return Err(parse_err(format!("unexpected tensor {name} after head")));
    }
    if layers.is_empty() {
        return Err(parse_err("no encoder layers".into()));
    }
    let params = Params {
        encoder: EncoderParams { layers },
        head: PrototypeHead {
            prototypes,
            trainable: true,
        },
    };
    params.validate().map_err(|e| parse_err(e.to_string()))?;
    Ok(params)
}
