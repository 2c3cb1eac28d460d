//! Binary checkpoint files.
//!
//! Layout: the magic line `MEMDGM-CKPT 1\n`, a little-endian `u64` manifest
//! length, the JSON manifest, then a blob of little-endian `f32` values
//! holding every tensor in manifest order. The manifest records the SHA-256
//! of the blob. Double-precision models are narrowed on save and widened on
//! load.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamStore, Real, RngState, Tensor};
use crate::error::{Error, Result};
use crate::model::{ArchConfig, Model, Nets};
use crate::training::{AdamState, TrainConfig};

pub const MAGIC: &[u8] = b"MEMDGM-CKPT 1\n";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub nets: Nets<T>,
    pub adam: Option<AdamState<T>>,
    pub epoch: usize,
    pub config: Option<TrainConfig>,
    pub rng_states: Vec<RngState>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Dtype {
    F32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Slot {
    Param,
    AdamM,
    AdamV,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    name: String,
    slot: Slot,
    shape: Vec<usize>,
    /// Offset into the blob, in elements.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    dtype: Dtype,
    arch: ArchConfig,
    config: Option<TrainConfig>,
    epoch: usize,
    adam_t: Option<u64>,
    rng_states: Vec<RngState>,
    tensors: Vec<Entry>,
    blob_len: usize,
    blob_sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl<T: Real> Checkpoint<T> {
    /// A checkpoint of parameters only.
    pub fn from_nets(nets: Nets<T>) -> Self {
        Self { nets, adam: None, epoch: 0, config: None, rng_states: Vec::new() }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let dtype = Dtype::F32;
        let params = &self.nets.params;
        let mut tensors = Vec::new();
        let mut blob = Vec::new();
        let mut offset = 0;
        let mut push = |name: &str, slot: Slot, t: &Tensor<T>| {
            tensors.push(Entry { name: name.to_string(), slot, shape: t.shape().to_vec(), offset });
            offset += t.numel();
            for &x in t.data() {
                blob.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
            }
        };
        for id in params.ids() {
            push(params.name(id), Slot::Param, params.get(id));
        }
        if let Some(adam) = &self.adam {
            if adam.m.len() != params.len() || adam.v.len() != params.len() {
                return Err(Error::Checkpoint("optimizer state does not match the parameters".into()));
            }
            for id in params.ids() {
                push(params.name(id), Slot::AdamM, &adam.m[id.index()]);
                push(params.name(id), Slot::AdamV, &adam.v[id.index()]);
            }
        }
        let manifest = Manifest {
            version: FORMAT_VERSION,
            dtype,
            arch: self.nets.model.arch.clone(),
            config: self.config.clone(),
            epoch: self.epoch,
            adam_t: self.adam.as_ref().map(|a| a.t),
            rng_states: self.rng_states.clone(),
            tensors,
            blob_len: blob.len(),
            blob_sha256: hex(&Sha256::digest(&blob)),
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&blob);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        if !bytes.starts_with(MAGIC) {
            return Err(bad("not a checkpoint file (bad magic)".into()));
        }
        let mut pos = MAGIC.len();
        let len_bytes: [u8; 8] =
            bytes.get(pos..pos + 8).and_then(|b| b.try_into().ok()).ok_or_else(|| bad("truncated header".into()))?;
        let json_len = u64::from_le_bytes(len_bytes) as usize;
        pos += 8;
        let json = bytes.get(pos..pos.saturating_add(json_len)).ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(json).map_err(|e| bad(format!("manifest: {e}")))?;
        pos += json_len;
        if manifest.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {}", manifest.version)));
        }
        let blob = &bytes[pos..];
        if blob.len() != manifest.blob_len {
            return Err(bad(format!("blob has {} bytes, manifest says {}", blob.len(), manifest.blob_len)));
        }
        if hex(&Sha256::digest(blob)) != manifest.blob_sha256 {
            return Err(bad("blob checksum mismatch".into()));
        }
        let width = 4;
        let read = |e: &Entry| -> Result<Tensor<T>> {
            let n: usize = e.shape.iter().product();
            let start = e.offset * width;
            let raw = blob
                .get(start..start + n * width)
                .ok_or_else(|| bad(format!("tensor `{}` runs past the blob", e.name)))?;
            let data: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect();
            Tensor::new(&e.shape, data)
        };

        let mut params = ParamStore::new();
        let model = Model::build(&manifest.arch, &mut params)?;
        let mut adam = manifest.adam_t.map(|t| {
            let mut a = AdamState::new(&params);
            a.t = t;
            a
        });
        let mut seen = vec![false; params.len()];
        for e in &manifest.tensors {
            let id = params.lookup(&e.name).ok_or_else(|| bad(format!("unknown tensor `{}`", e.name)))?;
            let value = read(e)?;
            if value.shape() != params.get(id).shape() {
                return Err(bad(format!("tensor `{}` has shape {:?}, expected {:?}", e.name, value.shape(), params.get(id).shape())));
            }
            match (e.slot, adam.as_mut()) {
                (Slot::Param, _) => {
                    params.set(id, value)?;
                    seen[id.index()] = true;
                }
                (Slot::AdamM, Some(a)) => a.m[id.index()] = value,
                (Slot::AdamV, Some(a)) => a.v[id.index()] = value,
                _ => return Err(bad(format!("optimizer tensor `{}` without optimizer state", e.name))),
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(bad(format!("missing tensor `{}`", params.name(crate::autodiff::ParamId(i)))));
        }
        Ok(Self {
            nets: Nets { model, params },
            adam,
            epoch: manifest.epoch,
            config: manifest.config,
            rng_states: manifest.rng_states,
        })
    }

    /// Writes atomically through a temporary sibling file.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
