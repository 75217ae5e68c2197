//! Embedding dumps and evaluation reports.
//!
//! Binary dump: `"PLRE" | version u32 | N u64 | D u64 | N·D f32`, all little
//! endian, rows in record order. The sidecar CSV next to it (same stem,
//! `.csv`) holds `person_id,camera_id,path` per row.

use std::fs;
use std::path::{Path, PathBuf};

use plr_core::evaluator::{EmbeddingSet, EvalResult, Metric};
use plr_core::Tensor;

use crate::error::{io_err, ReidError, Result};

pub const MAGIC: &[u8; 4] = b"PLRE";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct SidecarRow {
    pub person_id: i64,
    pub camera_id: u32,
    pub path: String,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("csv")
}

/// Writes `set` and its sidecar; `paths` are row-aligned with the set.
pub fn write_embeddings(path: &Path, set: &EmbeddingSet, paths: &[String]) -> Result<()> {
    if paths.len() != set.len() {
        return Err(ReidError::Config(format!("{} paths for {} embeddings", paths.len(), set.len())));
    }
    let mut out = Vec::with_capacity(24 + 4 * set.vectors.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    out.extend_from_slice(&(set.dim() as u64).to_le_bytes());
    for v in set.vectors.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, out).map_err(io_err(path))?;
    let side = sidecar_path(path);
    let mut w = csv::Writer::from_path(&side)?;
    for i in 0..set.len() {
        w.serialize(SidecarRow { person_id: set.person_ids[i], camera_id: set.camera_ids[i], path: paths[i].clone() })?;
    }
    w.flush().map_err(io_err(&side))?;
    Ok(())
}

/// Reads a dump and its sidecar back into an embedding set plus paths.
pub fn read_embeddings(path: &Path) -> Result<(EmbeddingSet, Vec<String>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let corrupt = |reason: &str| ReidError::Corrupt { path: path.to_path_buf(), reason: reason.into() };
    if bytes.len() < 24 || &bytes[..4] != MAGIC {
        return Err(corrupt("not an embedding dump"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(ReidError::VersionMismatch { found: version, expected: VERSION });
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    if bytes.len() != 24 + 4 * n * d {
        return Err(corrupt("size does not match N×D"));
    }
    let vals = bytes[24..].chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
    let mut r = csv::Reader::from_path(sidecar_path(path))?;
    let rows: Vec<SidecarRow> = r.deserialize().collect::<std::result::Result<_, _>>()?;
    if rows.len() != n {
        return Err(corrupt("sidecar row count differs from N"));
    }
    let set = EmbeddingSet {
        vectors: Tensor::from_vec(&[n, d], vals)?,
        person_ids: rows.iter().map(|r| r.person_id).collect(),
        camera_ids: rows.iter().map(|r| r.camera_id).collect(),
    };
    Ok((set, rows.into_iter().map(|r| r.path).collect()))
}

/// The JSON written by `eval`.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub cmc1: f64,
    pub cmc5: f64,
    pub cmc10: f64,
    pub num_valid_queries: usize,
    pub num_excluded_queries: usize,
    pub metric: Metric,
}

impl EvalReport {
    pub fn new(r: &EvalResult, metric: Metric) -> Self {
        EvalReport {
            map: r.map,
            cmc1: r.rank(1),
            cmc5: r.rank(5),
            cmc10: r.rank(10),
            num_valid_queries: r.num_valid_queries,
            num_excluded_queries: r.num_excluded_queries,
            metric,
        }
    }
}
