//! Training checkpoints.
//!
//! ```text
//! "PLRC" | version: u32 LE | header length: u64 LE | header JSON
//!        | f32 LE payload, tensors in header order | SHA-256 of all preceding bytes
//! ```
//!
//! The header carries the full training config, its hash, the class count,
//! epoch/step counters and the tensor directory. Tensors are named
//! `param/…`, `buffer/…`, `adam.m/…`, `adam.v/…` and `centers/{global,local}`.
//! Sampling and augmentation randomness is derived from `(seed, epoch, slot)`,
//! so seed and counters are the whole random state.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use plr_core::losses::Centers;
use plr_core::nn::Kind;
use plr_core::optim::Moments;
use plr_core::trainer::{TrainConfig, TrainState};
use plr_core::Tensor;
use sha2::{Digest, Sha256};

use crate::config::config_hash;
use crate::error::{io_err, ReidError, Result};

pub const MAGIC: &[u8; 4] = b"PLRC";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Header {
    pub config: TrainConfig,
    pub config_hash: String,
    pub num_classes: usize,
    /// Next epoch to run.
    pub epoch: usize,
    pub step: u64,
    pub seed: u64,
    pub adam_steps: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

fn collect(state: &TrainState) -> (Header, Vec<&Tensor<f32>>) {
    let store = &state.model.store;
    let mut named: Vec<(String, &Tensor<f32>)> = Vec::new();
    let mut adam_steps = BTreeMap::new();
    for id in store.ids() {
        let tag = if store.kind(id) == Kind::Param { "param" } else { "buffer" };
        named.push((format!("{tag}/{}", store.name(id)), store.get(id)));
    }
    for id in store.ids() {
        if let Some(Some(m)) = state.adam.state.get(id.0) {
            named.push((format!("adam.m/{}", store.name(id)), &m.m));
            named.push((format!("adam.v/{}", store.name(id)), &m.v));
            adam_steps.insert(store.name(id).to_string(), m.step);
        }
    }
    if let Some(c) = &state.centers_global {
        named.push(("centers/global".into(), &c.c));
    }
    named.push(("centers/local".into(), &state.centers_local.c));
    let header = Header {
        config: state.cfg.clone(),
        config_hash: config_hash(&state.cfg),
        num_classes: state.model.num_classes,
        epoch: state.epoch,
        step: state.step,
        seed: state.cfg.seed,
        adam_steps,
        tensors: named.iter().map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() }).collect(),
    };
    (header, named.into_iter().map(|(_, t)| t).collect())
}

pub fn to_bytes(state: &TrainState) -> Result<Vec<u8>> {
    let (header, data) = collect(state);
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + json.len() + data.iter().map(|t| 4 * t.numel()).sum::<usize>() + 32);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in data {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Writes atomically (temporary file, then rename).
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let bytes = to_bytes(state)?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn split_header<'a>(bytes: &'a [u8], path: &Path) -> Result<(Header, &'a [u8])> {
    let corrupt = |reason: &str| ReidError::Corrupt { path: path.to_path_buf(), reason: reason.into() };
    if bytes.len() < 16 + 32 || &bytes[..4] != MAGIC {
        return Err(corrupt("not a checkpoint (bad magic or truncated)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ReidError::VersionMismatch { found: version, expected: VERSION });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }
    let hlen = u64::from_le_bytes(body[8..16].try_into().unwrap()) as usize;
    let json = body.get(16..16 + hlen).ok_or_else(|| corrupt("header length past end of file"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| corrupt(&format!("header: {e}")))?;
    if config_hash(&header.config) != header.config_hash {
        return Err(corrupt("stored config does not match its hash"));
    }
    Ok((header, &body[16 + hlen..]))
}

pub fn read_header(path: &Path) -> Result<Header> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    Ok(split_header(&bytes, path)?.0)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TrainState> {
    let (h, payload) = split_header(bytes, path)?;
    let corrupt = |reason: String| ReidError::Corrupt { path: path.to_path_buf(), reason };
    let total: usize = h.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != 4 * total {
        return Err(corrupt(format!("payload holds {} bytes, directory needs {}", payload.len(), 4 * total)));
    }
    let mut tensors = BTreeMap::new();
    let mut off = 0;
    for e in &h.tensors {
        let n: usize = e.shape.iter().product();
        let vals = payload[off..off + 4 * n].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        off += 4 * n;
        tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, vals)?);
    }

    let mut state = TrainState::new(&h.config, h.num_classes)?;
    let mut take = |name: String, shape: &[usize]| -> Result<Tensor<f32>> {
        let t = tensors.remove(&name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(corrupt(format!("tensor {name} has shape {:?}, model expects {shape:?}", t.shape())));
        }
        Ok(t)
    };
    let ids: Vec<_> = state.model.store.ids().collect();
    state.adam.state = vec![None; ids.len()];
    for id in ids {
        let store = &mut state.model.store;
        let name = store.name(id).to_string();
        let shape = store.get(id).shape().to_vec();
        let tag = if store.kind(id) == Kind::Param { "param" } else { "buffer" };
        *store.get_mut(id) = take(format!("{tag}/{name}"), &shape)?;
        if let Some(&step) = h.adam_steps.get(&name) {
            let m = take(format!("adam.m/{name}"), &shape)?;
            let v = take(format!("adam.v/{name}"), &shape)?;
            state.adam.state[id.0] = Some(Moments { step, m, v });
        }
    }
    if let Some(c) = state.centers_global.as_mut() {
        let shape = c.c.shape().to_vec();
        c.c = take("centers/global".into(), &shape)?;
    }
    let shape = state.centers_local.c.shape().to_vec();
    state.centers_local = Centers { c: take("centers/local".into(), &shape)?, alpha: h.config.center_alpha };
    if let Some(extra) = tensors.keys().next() {
        return Err(corrupt(format!("unexpected tensor {extra}")));
    }
    state.epoch = h.epoch;
    state.step = h.step;
    Ok(state)
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    from_bytes(&bytes, path)
}

/// Loads and checks that the checkpoint was written for `cfg`.
pub fn load_checkpoint_for(path: &Path, cfg: &TrainConfig) -> Result<TrainState> {
    let header = read_header(path)?;
    let given = config_hash(cfg);
    if header.config_hash != given {
        return Err(ReidError::ConfigMismatch { stored: header.config_hash, given });
    }
    load_checkpoint(path)
}
