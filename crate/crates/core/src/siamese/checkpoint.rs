use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::model::{ModelSpec, Params, SiameseNet};
use super::train::TrainConfig;
use crate::error::{Error, Result};
use crate::imaging::io::atomic_write;
use crate::sampler::hex_digest;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// A trained network plus everything needed to audit how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub net: SiameseNet,
    pub train_config: TrainConfig,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub manifest_digest: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Sidecar {
    model_spec: ModelSpec,
    train_config: TrainConfig,
    patch_size: (usize, usize),
    best_epoch: usize,
    history: Vec<EpochRecord>,
    manifest_digest: String,
    weights_sha256: String,
    num_parameters: usize,
}

const WEIGHTS: &str = "weights.bin";
const SIDECAR: &str = "checkpoint.json";
const MAGIC: &[u8; 4] = b"TLW1";

impl Checkpoint {
    pub fn patch_size(&self) -> (usize, usize) {
        self.net.patch_size
    }

    pub fn embed_patch(&self, patch: &Array2<u8>) -> Result<Vec<f32>> {
        let expected = self.patch_size();
        if patch.dim() != expected {
            return Err(Error::SizeMismatch {
                expected,
                actual: patch.dim(),
                index: None,
            });
        }
        Ok(self.net.embed(&[patch])?.pop().expect("one patch in, one vector out"))
    }

    /// Same as mapping [`Checkpoint::embed_patch`], computed in one pass.
    pub fn embed_batch(&self, patches: &[&Array2<u8>]) -> Result<Vec<Vec<f32>>> {
        self.net.embed(patches)
    }

    /// Write `dir/weights.bin` and the human-readable `dir/checkpoint.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let weights = encode_weights(&self.net.params);
        let sidecar = Sidecar {
            model_spec: self.net.spec.clone(),
            train_config: self.train_config.clone(),
            patch_size: self.patch_size(),
            best_epoch: self.best_epoch,
            history: self.history.clone(),
            manifest_digest: self.manifest_digest.clone(),
            weights_sha256: hex_digest(&weights),
            num_parameters: self.net.params.num_parameters(),
        };
        atomic_write(&dir.join(WEIGHTS), &weights)?;
        let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serializes");
        atomic_write(&dir.join(SIDECAR), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let sidecar_path = dir.join(SIDECAR);
        let text = std::fs::read_to_string(&sidecar_path).map_err(|e| Error::io(&sidecar_path, e))?;
        let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::format(&sidecar_path, e))?;
        let weights_path = dir.join(WEIGHTS);
        let bytes = std::fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
        if hex_digest(&bytes) != sidecar.weights_sha256 {
            return Err(Error::format(&weights_path, "weights do not match the sidecar digest"));
        }
        let template = SiameseNet::new(&sidecar.model_spec, sidecar.patch_size)?;
        let params = decode_weights(&bytes, &template.params).map_err(|m| Error::format(&weights_path, m))?;
        Ok(Self {
            net: SiameseNet::with_params(&sidecar.model_spec, sidecar.patch_size, params)?,
            train_config: sidecar.train_config,
            history: sidecar.history,
            best_epoch: sidecar.best_epoch,
            manifest_digest: sidecar.manifest_digest,
        })
    }
}

fn encode_weights(params: &Params) -> Vec<u8> {
    let tensors = params.tensors();
    let mut out = Vec::with_capacity(8 + params.num_parameters() * 4 + tensors.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        out.extend_from_slice(&(t.len() as u64).to_le_bytes());
        for v in t {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_weights(bytes: &[u8], template: &Params) -> std::result::Result<Params, String> {
    let mut params = template.clone();
    let mut rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or("bad magic")?;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        if rest.len() < n {
            return Err("truncated weights".into());
        }
        let (head, tail) = rest.split_at(n);
        rest = tail;
        Ok(head)
    };
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut tensors = params.tensors_mut();
    if count != tensors.len() {
        return Err(format!("expected {} tensors, found {count}", tensors.len()));
    }
    for t in tensors.iter_mut() {
        let len = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        if len != t.len() {
            return Err(format!("tensor length {len} does not match {}", t.len()));
        }
        for (v, chunk) in t.iter_mut().zip(take(len * 4)?.chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    if !rest.is_empty() {
        return Err("trailing bytes after weights".into());
    }
    Ok(params)
}
