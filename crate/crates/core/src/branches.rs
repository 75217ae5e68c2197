//! Global and local heads on top of the shared map, and descriptor assembly.

use alloc::vec::Vec;

use num_traits::Float;

use crate::autograd::{Graph, Var};
use crate::backbone::{BackboneConfig, StagePair};
use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Stripe vectors `g_1..g_n`, each `[N, C]`, ordered top to bottom.
#[derive(Clone, Debug)]
pub struct PartVectors<T> {
    pub parts: Vec<Var<T>>,
}

impl<T: Real> PartVectors<T> {
    pub fn len(&self) -> usize {
        self.parts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.parts.first().map_or(0, |p| p.shape()[1])
    }
}

/// Averages each of `n` equal horizontal stripes of `map`.
pub fn part_split_average<T: Real>(g: &Graph<T>, map: &Var<T>, n: usize) -> Result<PartVectors<T>> {
    let c = map.value().dims4()?.1;
    let pooled = ops::part_avg_pool(g, map, n)?;
    split(g, &pooled, n, c)
}

fn split<T: Real>(g: &Graph<T>, concat: &Var<T>, n: usize, c: usize) -> Result<PartVectors<T>> {
    let parts = (0..n).map(|p| ops::narrow_cols(g, concat, p * c, c)).collect::<Result<_>>()?;
    Ok(PartVectors { parts })
}

/// `[g_1 ‖ … ‖ g_n]`.
pub fn concat_parts<T: Real>(g: &Graph<T>, pv: &PartVectors<T>) -> Result<Var<T>> {
    if pv.parts.len() == 1 {
        return Ok(pv.parts[0].clone());
    }
    let refs: Vec<&Var<T>> = pv.parts.iter().collect();
    ops::concat_cols(g, &refs)
}

/// Spatial mean per channel.
pub fn global_average<T: Real>(g: &Graph<T>, map: &Var<T>) -> Result<Var<T>> {
    ops::global_avg_pool(g, map)
}

#[derive(Clone, Debug)]
pub struct GlobalOutput<T> {
    /// Branch stage output before pooling.
    pub map: Var<T>,
    pub f: Var<T>,
}

#[derive(Clone, Debug)]
pub struct LocalOutput<T> {
    pub map: Var<T>,
    pub parts: PartVectors<T>,
    pub g: Var<T>,
}

/// Own conv4/conv5 followed by global max pooling.
#[derive(Clone, Debug)]
pub struct GlobalBranch {
    pub stage: StagePair,
}

impl GlobalBranch {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &BackboneConfig) -> Result<Self> {
        Ok(GlobalBranch { stage: StagePair::new(b, cfg)? })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, shared: &Var<T>) -> Result<GlobalOutput<T>> {
        let map = self.stage.forward(cx, shared)?;
        let f = ops::global_max_pool(cx.graph, &map)?;
        Ok(GlobalOutput { map, f })
    }
}

/// Own conv4/conv5 followed by `parts` stripe averages.
#[derive(Clone, Debug)]
pub struct LocalBranch {
    pub stage: StagePair,
    pub parts: usize,
}

impl LocalBranch {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &BackboneConfig, parts: usize) -> Result<Self> {
        let h = cfg.shared_size().0;
        if parts == 0 || !h.is_multiple_of(parts) {
            return Err(Error::Indivisible { height: h, parts });
        }
        Ok(LocalBranch { stage: StagePair::new(b, cfg)?, parts })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, shared: &Var<T>) -> Result<LocalOutput<T>> {
        let map = self.stage.forward(cx, shared)?;
        let c = map.value().dims4()?.1;
        let g = ops::part_avg_pool(cx.graph, &map, self.parts)?;
        let parts = split(cx.graph, &g, self.parts, c)?;
        Ok(LocalOutput { map, parts, g })
    }
}

/// Matching vectors for a batch: rows of `d = [f ‖ g]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Descriptor<T> {
    pub global_dim: usize,
    pub local_dim: usize,
    /// `[N, global_dim + local_dim]`.
    pub d: Tensor<T>,
}

/// Concatenates per-row global and local vectors, optionally scaling each row
/// to unit length. All-zero rows stay zero.
pub fn assemble_descriptor<T: Real>(f: Option<&Tensor<T>>, g: &Tensor<T>, normalize: bool) -> Result<Descriptor<T>> {
    let (n, dl) = g.dims2()?;
    let dg = match f {
        Some(f) => {
            let (nf, dg) = f.dims2()?;
            if nf != n {
                return Err(crate::error::shape_err("assemble_descriptor", alloc::format!("{nf} global rows vs {n} local rows")));
            }
            dg
        }
        None => 0,
    };
    let mut data = Vec::with_capacity(n * (dg + dl));
    for i in 0..n {
        let start = data.len();
        if let Some(f) = f {
            data.extend_from_slice(f.row(i));
        }
        data.extend_from_slice(g.row(i));
        if normalize {
            normalize_row(&mut data[start..]);
        }
    }
    Ok(Descriptor { global_dim: dg, local_dim: dl, d: Tensor::from_vec(&[n, dg + dl], data)? })
}

pub(crate) fn normalize_row<T: Real>(row: &mut [T]) {
    let norm = Float::sqrt(row.iter().map(|&v| v * v).sum::<T>());
    if norm > T::zero() {
        row.iter_mut().for_each(|v| *v = *v / norm);
    }
}
