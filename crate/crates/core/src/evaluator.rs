//! Descriptor extraction, distance matrices, and the cross-camera CMC/mAP protocol.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::branches::normalize_row;
use crate::dataset::{preprocess_test, stack, AugmentConfig, ImageRecord};
use crate::error::{shape_err, Error, Result};
use crate::model::PlrOsNet;
use crate::tensor::Tensor;
use crate::trainer::ImageSource;

/// Row-aligned descriptors and labels. `person_ids[i] == -1` marks junk.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    /// `[N, D]`.
    pub vectors: Tensor<f32>,
    pub person_ids: Vec<i64>,
    pub camera_ids: Vec<u32>,
}

impl EmbeddingSet {
    pub fn len(&self) -> usize {
        self.person_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.person_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.shape()[1]
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalResult {
    pub map: f64,
    /// `cmc[k-1]` is rank-k accuracy.
    pub cmc: Vec<f64>,
    pub num_valid_queries: usize,
    /// Queries dropped for having no relevant gallery entry.
    pub num_excluded_queries: usize,
}

impl EvalResult {
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc.get(k - 1).or(self.cmc.last()).copied().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Metric {
    Euclidean,
    /// Euclidean distance between unit-length rows.
    #[default]
    Cosine,
}

/// Descriptors for `records`, `batch_size` images per forward pass.
pub fn extract_embeddings(
    model: &mut PlrOsNet<f32>,
    source: &(impl ImageSource + ?Sized),
    records: &[ImageRecord],
    batch_size: usize,
    preprocess: &AugmentConfig,
) -> Result<EmbeddingSet> {
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let dim = model.cfg.descriptor_dim();
    let mut data = Vec::with_capacity(records.len() * dim);
    for start in (0..records.len()).step_by(batch_size) {
        let end = (start + batch_size).min(records.len());
        let items = (start..end).map(|i| preprocess_test(&source.load(i)?, preprocess)).collect::<Result<Vec<_>>>()?;
        let d = model.descriptors(stack(&items)?)?;
        data.extend_from_slice(d.d.data());
    }
    Ok(EmbeddingSet {
        vectors: Tensor::from_vec(&[records.len(), dim], data)?,
        person_ids: records.iter().map(|r| if r.is_junk { -1 } else { r.person_id }).collect(),
        camera_ids: records.iter().map(|r| r.camera_id).collect(),
    })
}

/// Pairwise distances `[Nq, Ng]`, accumulated in double precision.
pub fn distance_matrix(q: &EmbeddingSet, g: &EmbeddingSet, metric: Metric) -> Result<Tensor<f64>> {
    if q.dim() != g.dim() {
        return Err(shape_err("distance_matrix", alloc::format!("query dim {} vs gallery dim {}", q.dim(), g.dim())));
    }
    let rows = |s: &EmbeddingSet| -> Vec<Vec<f64>> {
        (0..s.len())
            .map(|i| {
                let mut r: Vec<f64> = s.vectors.row(i).iter().map(|&v| v as f64).collect();
                if metric == Metric::Cosine {
                    normalize_row(&mut r);
                }
                r
            })
            .collect()
    };
    let (qr, gr) = (rows(q), rows(g));
    let mut out = Vec::with_capacity(qr.len() * gr.len());
    for a in &qr {
        for b in &gr {
            let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
            out.push(Float::sqrt(s));
        }
    }
    Tensor::from_vec(&[qr.len(), gr.len()], out)
}

/// Market-1501 protocol. For each query the gallery is ranked by ascending
/// distance (ties by gallery index); entries with the query's identity and
/// camera, and junk entries, are removed; AP averages precision at each hit.
pub fn cmc_map(
    dist: &Tensor<f64>,
    q_pids: &[i64],
    q_cams: &[u32],
    g_pids: &[i64],
    g_cams: &[u32],
    k_max: usize,
) -> Result<EvalResult> {
    let (nq, ng) = dist.dims2()?;
    if q_pids.len() != nq || q_cams.len() != nq || g_pids.len() != ng || g_cams.len() != ng {
        return Err(shape_err("cmc_map", "label arrays do not match the distance matrix"));
    }
    if k_max == 0 {
        return Err(Error::Config("k_max must be positive".into()));
    }
    if dist.data().iter().any(|d| d.is_nan()) {
        return Err(Error::Config("distance matrix contains NaN".into()));
    }
    let mut hits_at = vec![0usize; k_max];
    let mut ap_sum = 0.0;
    let mut valid = 0usize;
    let mut order: Vec<usize> = (0..ng).collect();
    for qi in 0..nq {
        rank_into(dist.row(qi), &mut order);
        let kept = order.iter().copied().filter(|&j| counts(q_pids[qi], q_cams[qi], g_pids[j], g_cams[j]));
        let mut n_rel = 0usize;
        let mut first_hit = None;
        let mut prec_sum = 0.0;
        for (rank, j) in kept.enumerate() {
            if g_pids[j] == q_pids[qi] {
                n_rel += 1;
                first_hit.get_or_insert(rank);
                prec_sum += n_rel as f64 / (rank + 1) as f64;
            }
        }
        let Some(first) = first_hit else { continue };
        valid += 1;
        ap_sum += prec_sum / n_rel as f64;
        for h in hits_at.iter_mut().skip(first) {
            *h += 1;
        }
    }
    if valid == 0 {
        return Err(Error::NoValidQueries { excluded: nq });
    }
    Ok(EvalResult {
        map: ap_sum / valid as f64,
        cmc: hits_at.iter().map(|&h| h as f64 / valid as f64).collect(),
        num_valid_queries: valid,
        num_excluded_queries: nq - valid,
    })
}

fn rank_into(row: &[f64], order: &mut [usize]) {
    for (i, o) in order.iter_mut().enumerate() {
        *o = i;
    }
    order.sort_by(|&a, &b| row[a].total_cmp(&row[b]).then(a.cmp(&b)));
}

fn counts(q_pid: i64, q_cam: u32, g_pid: i64, g_cam: u32) -> bool {
    g_pid != -1 && !(g_pid == q_pid && g_cam == q_cam)
}

/// Gallery indices for one query in the order `cmc_map` scores them:
/// ascending distance, ties by index, excluded entries removed.
pub fn ranked_gallery(row: &[f64], q_pid: i64, q_cam: u32, g_pids: &[i64], g_cams: &[u32]) -> Vec<usize> {
    let mut order = vec![0; row.len()];
    rank_into(row, &mut order);
    order.retain(|&j| counts(q_pid, q_cam, g_pids[j], g_cams[j]));
    order
}

/// Extract, measure and score query against gallery.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &mut PlrOsNet<f32>,
    query: (&[ImageRecord], &(impl ImageSource + ?Sized)),
    gallery: (&[ImageRecord], &(impl ImageSource + ?Sized)),
    preprocess: &AugmentConfig,
    metric: Metric,
    batch_size: usize,
    k_max: usize,
) -> Result<EvalResult> {
    let q = extract_embeddings(model, query.1, query.0, batch_size, preprocess)?;
    let g = extract_embeddings(model, gallery.1, gallery.0, batch_size, preprocess)?;
    let d = distance_matrix(&q, &g, metric)?;
    cmc_map(&d, &q.person_ids, &q.camera_ids, &g.person_ids, &g.camera_ids, k_max)
}

#[cfg(test)]
pub(crate) mod oracle {
    //! Loop-only reimplementation used to cross-check `cmc_map`.
    use super::*;

    pub fn cmc_map_oracle(
        dist: &Tensor<f64>,
        q_pids: &[i64],
        q_cams: &[u32],
        g_pids: &[i64],
        g_cams: &[u32],
        k_max: usize,
    ) -> Option<(f64, Vec<f64>)> {
        let (nq, ng) = (q_pids.len(), g_pids.len());
        let mut aps = Vec::new();
        let mut firsts = Vec::new();
        for qi in 0..nq {
            let keep = |j: usize| g_pids[j] != -1 && !(g_pids[j] == q_pids[qi] && g_cams[j] == q_cams[qi]);
            // rank of each kept entry = number of kept entries strictly before it
            let mut by_rank: Vec<Option<usize>> = vec![None; ng];
            for j in 0..ng {
                if !keep(j) {
                    continue;
                }
                let dj = dist.row(qi)[j];
                let mut r = 0;
                for k in 0..ng {
                    if keep(k) {
                        let dk = dist.row(qi)[k];
                        if dk < dj || (dk == dj && k < j) {
                            r += 1;
                        }
                    }
                }
                by_rank[r] = Some(j);
            }
            let mut n_rel = 0;
            let mut sum = 0.0;
            let mut first = None;
            let mut r = 0;
            for j in by_rank.into_iter().flatten() {
                if g_pids[j] == q_pids[qi] {
                    n_rel += 1;
                    if first.is_none() {
                        first = Some(r);
                    }
                    sum += n_rel as f64 / (r + 1) as f64;
                }
                r += 1;
            }
            if let Some(f) = first {
                aps.push(sum / n_rel as f64);
                firsts.push(f);
            }
        }
        if aps.is_empty() {
            return None;
        }
        let mut total = 0.0;
        for a in &aps {
            total += a;
        }
        let cmc = (0..k_max)
            .map(|k| firsts.iter().filter(|&&f| f <= k).count() as f64 / firsts.len() as f64)
            .collect();
        Some((total / aps.len() as f64, cmc))
    }
}
