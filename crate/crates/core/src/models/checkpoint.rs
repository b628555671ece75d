//! On-disk model format: a directory holding `model.json` (architecture,
//! seed, entry names and shapes, payload digest) and `params.f64le`, the
//! concatenated parameter values as little-endian `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::extractor::{Extractor, ExtractorConfig};
use super::mlp::{Mlp, MlpSpec};
use super::params::ParamSet;
use crate::error::{Error, Result};
use crate::ndiff::Tensor;

const FORMAT_VERSION: u32 = 1;
const META: &str = "model.json";
const PAYLOAD: &str = "params.f64le";

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum Architecture {
    Extractor { config: ExtractorConfig, seed: u64 },
    Mlp { spec: MlpSpec },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Metadata {
    format_version: u32,
    architecture: Architecture,
    frozen: bool,
    entries: Vec<EntryMeta>,
    payload_sha256: String,
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn write(dir: &Path, architecture: Architecture, params: &ParamSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut payload = Vec::new();
    for e in params.entries() {
        for v in e.value.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let meta = Metadata {
        format_version: FORMAT_VERSION,
        architecture,
        frozen: params.is_frozen(),
        entries: params
            .entries()
            .iter()
            .map(|e| EntryMeta {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                trainable: e.trainable,
            })
            .collect(),
        payload_sha256: hex_digest(&payload),
    };
    fs::write(dir.join(PAYLOAD), &payload)?;
    fs::write(dir.join(META), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}

fn read(dir: &Path) -> Result<(Metadata, Vec<Tensor>)> {
    let meta: Metadata = serde_json::from_slice(&fs::read(dir.join(META))?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", dir.join(META).display())))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {} (expected {FORMAT_VERSION})",
            meta.format_version
        )));
    }
    let payload = fs::read(dir.join(PAYLOAD))?;
    if hex_digest(&payload) != meta.payload_sha256 {
        return Err(Error::Checkpoint(
            "payload digest does not match metadata".into(),
        ));
    }
    let expected: usize = meta
        .entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>())
        .sum();
    if payload.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "payload holds {} bytes, metadata describes {expected} values",
            payload.len()
        )));
    }
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    let mut tensors = Vec::with_capacity(meta.entries.len());
    for e in &meta.entries {
        let n = e.shape.iter().product();
        tensors.push(Tensor::new(&e.shape, values.by_ref().take(n).collect())?);
    }
    Ok((meta, tensors))
}

fn restore(params: &mut ParamSet, meta: &Metadata, tensors: Vec<Tensor>) -> Result<()> {
    for (have, want) in params.entries().iter().zip(&meta.entries) {
        if have.name != want.name || have.trainable != want.trainable {
            return Err(Error::Checkpoint(format!(
                "entry `{}` in the file does not match `{}` in the model",
                want.name, have.name
            )));
        }
    }
    params.load_values(tensors)?;
    if meta.frozen {
        params.freeze();
    }
    Ok(())
}

pub fn save_extractor(extractor: &Extractor, dir: &Path) -> Result<()> {
    let arch = Architecture::Extractor {
        config: extractor.config.clone(),
        seed: extractor.seed,
    };
    write(dir, arch, &extractor.params)
}

/// Loads an extractor, failing if its hyperparameters differ from
/// `expected` (when given).
pub fn load_extractor(dir: &Path, expected: Option<&ExtractorConfig>) -> Result<Extractor> {
    let (meta, tensors) = read(dir)?;
    let Architecture::Extractor { config, seed } = &meta.architecture else {
        return Err(Error::Checkpoint(format!(
            "{} does not hold an extractor",
            dir.display()
        )));
    };
    if let Some(want) = expected {
        if want != config {
            return Err(Error::Checkpoint(format!(
                "hyperparameter mismatch: checkpoint has {config:?}, run expects {want:?}"
            )));
        }
    }
    let mut extractor = Extractor::init(config.clone(), *seed)?;
    restore(&mut extractor.params, &meta, tensors)?;
    Ok(extractor)
}

pub fn save_mlp(mlp: &Mlp, dir: &Path) -> Result<()> {
    write(
        dir,
        Architecture::Mlp {
            spec: mlp.spec.clone(),
        },
        &mlp.params,
    )
}

pub fn load_mlp(dir: &Path, expected: Option<&MlpSpec>) -> Result<Mlp> {
    let (meta, tensors) = read(dir)?;
    let Architecture::Mlp { spec } = &meta.architecture else {
        return Err(Error::Checkpoint(format!(
            "{} does not hold an MLP",
            dir.display()
        )));
    };
    if let Some(want) = expected {
        if want != spec {
            return Err(Error::Checkpoint(format!(
                "hyperparameter mismatch: checkpoint has {spec:?}, run expects {want:?}"
            )));
        }
    }
    let mut mlp = Mlp::init(spec.clone(), 0)?;
    restore(&mut mlp.params, &meta, tensors)?;
    Ok(mlp)
}
