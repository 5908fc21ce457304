//! Versioned parameter archive.
//!
//! Layout: an ASCII magic line, a one-line JSON manifest (config, vocabulary
//! in id order, tensor names and shapes), then the raw little-endian f64
//! data of every tensor in manifest order, row-major.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::fewshot::{Model, ModelConfig, ModelParams};
use crate::graph::Matrix;
use crate::rng::{substream, Stream};

const MAGIC: &str = "fsre-checkpoint 1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    vocab: Vec<String>,
    tensors: Vec<TensorMeta>,
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let manifest = Manifest {
        config: model.config.clone(),
        vocab: model.vocab.tokens().to_vec(),
        tensors: model
            .params
            .tensors()
            .iter()
            .map(|(name, t)| TensorMeta {
                name: (*name).to_owned(),
                rows: t.nrows(),
                cols: t.ncols(),
            })
            .collect(),
    };
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC.as_bytes());
    bytes.push(b'\n');
    bytes.extend_from_slice(
        serde_json::to_string(&manifest)
            .expect("manifest serialization cannot fail")
            .as_bytes(),
    );
    bytes.push(b'\n');
    for (_, tensor) in model.params.tensors() {
        for v in tensor.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;

    let magic_end = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing magic line".into()))?;
    let magic = std::str::from_utf8(&bytes[..magic_end])
        .map_err(|_| Error::Checkpoint("magic line is not UTF-8".into()))?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "unsupported archive (magic {magic:?}, expected {MAGIC:?})"
        )));
    }
    let manifest_end = bytes[magic_end + 1..]
        .iter()
        .position(|&b| b == b'\n')
        .map(|p| p + magic_end + 1)
        .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[magic_end + 1..manifest_end])
        .map_err(|e| Error::Checkpoint(format!("invalid manifest: {e}")))?;

    let vocab = Vocab::from_tokens(manifest.vocab)?;
    // Fresh zero parameters shaped by the config, then fill from the blob.
    let mut params = {
        let mut rng = substream(0, Stream::Init);
        let mut p = ModelParams::init(&manifest.config, vocab.len(), &mut rng);
        for (_, t) in p.tensors_mut() {
            t.fill(0.0);
        }
        p
    };

    let mut offset = manifest_end + 1;
    let expected: Vec<(&'static str, &mut Matrix)> = params.tensors_mut();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::Checkpoint(format!(
            "manifest has {} tensors, model needs {}",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    for ((name, tensor), meta) in expected.into_iter().zip(&manifest.tensors) {
        if name != meta.name {
            return Err(Error::Checkpoint(format!(
                "tensor order mismatch: archive has {:?}, expected {:?}",
                meta.name, name
            )));
        }
        if tensor.dim() != (meta.rows, meta.cols) {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?} in the archive but the config implies {:?}",
                (meta.rows, meta.cols),
                tensor.dim()
            )));
        }
        let n = meta.rows * meta.cols * 8;
        if offset + n > bytes.len() {
            return Err(Error::Checkpoint(format!("archive truncated in tensor {name}")));
        }
        for (i, v) in tensor.iter_mut().enumerate() {
            let at = offset + i * 8;
            *v = f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        }
        offset += n;
    }
    if offset != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - offset
        )));
    }
    Ok(Model {
        config: manifest.config,
        params,
        vocab,
    })
}
