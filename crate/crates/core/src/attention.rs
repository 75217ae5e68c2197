//! Spatial (SAM) and channel (CAM) attention for the shared trunk.
//!
//! SAM relates every spatial position to every other one: query and key
//! embeddings are 1×1 convolutions down to `c/r` channels, the affinity is a
//! row softmax of their inner products, and a value projection of the input is
//! aggregated by it. A learned scalar scales the aggregated map before the
//! residual add and starts at zero, so a fresh module is the identity.
//!
//! CAM is squeeze-and-excitation: global average pool, `c → c/r → c` MLP,
//! sigmoid, channel rescale. No channel affinity matrix is formed.
//!
//! Hidden widths use floor division `c / r`; `c < r` is rejected.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Builder, Conv2d, Ctx, Linear, ParamId};
use crate::ops::{self, ConvGeom};
use crate::tensor::{gemm, Real, Tensor, Trans};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionConfig {
    pub sam_reduction: usize,
    pub cam_reduction: usize,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        AttentionConfig { sam_reduction: 8, cam_reduction: 16 }
    }
}

fn reduced(c: usize, r: usize) -> Result<usize> {
    if r == 0 || c < r {
        return Err(Error::Config(alloc::format!("attention needs channels ({c}) >= reduction ({r}) >= 1")));
    }
    Ok(c / r)
}

/// Row-softmax affinity `softmax_j(q_i · k_j)` for one image, `q, k: [c', L]`.
///
/// Entries more than 80 nats below the row maximum are set to zero. They are
/// far below f32 resolution anyway, and as subnormals they slow every later GEMM.
pub fn affinity<T: Real>(q: &[T], k: &[T], cq: usize, len: usize, out: &mut [T]) {
    gemm(Trans::Yes, Trans::No, len, cq, len, T::one(), q, k, T::zero(), out);
    let floor = T::lit(-80.0);
    for row in out.chunks_mut(len) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for v in row.iter_mut() {
            let z = *v - m;
            *v = if z < floor { T::zero() } else { z.exp() };
            s = s + *v;
        }
        let inv = T::one() / s;
        row.iter_mut().for_each(|v| *v = *v * inv);
    }
}

/// `o[:, i] = Σ_j P[i, j] · v[:, j]` with `P = affinity(q, k)`, per image.
///
/// The `L×L` affinity is never stored; backward recomputes it one image at a time.
pub fn spatial_aggregate<T: Real>(g: &Graph<T>, q: &Var<T>, k: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
    let (n, cq, h, w) = q.value().dims4()?;
    let (_, cv, _, _) = v.value().dims4()?;
    if k.shape() != q.shape() || v.shape()[0] != n || v.shape()[2..] != [h, w] {
        return Err(Error::Shape {
            op: "spatial_aggregate",
            detail: alloc::format!("q {:?} k {:?} v {:?}", q.shape(), k.shape(), v.shape()),
        });
    }
    let len = h * w;
    let mut out = Tensor::zeros(v.shape());
    let mut p = vec![T::zero(); len * len];
    for ni in 0..n {
        let qi = &q.value().data()[ni * cq * len..][..cq * len];
        let ki = &k.value().data()[ni * cq * len..][..cq * len];
        let vi = &v.value().data()[ni * cv * len..][..cv * len];
        affinity(qi, ki, cq, len, &mut p);
        let oi = &mut out.data_mut()[ni * cv * len..][..cv * len];
        gemm(Trans::No, Trans::Yes, cv, len, len, T::one(), vi, &p, T::zero(), oi);
    }
    let (qs, ks, vs) = (q.rc(), k.rc(), v.rc());
    Ok(g.record(out, &[q, k, v], move |dy, needs| {
        let mut dq = needs[0].then(|| Tensor::zeros(qs.shape()));
        let mut dk = needs[1].then(|| Tensor::zeros(ks.shape()));
        let mut dv = needs[2].then(|| Tensor::zeros(vs.shape()));
        let mut p = vec![T::zero(); len * len];
        let mut dp = vec![T::zero(); len * len];
        for ni in 0..n {
            let qi = &qs.data()[ni * cq * len..][..cq * len];
            let ki = &ks.data()[ni * cq * len..][..cq * len];
            let vi = &vs.data()[ni * cv * len..][..cv * len];
            let gi = &dy.data()[ni * cv * len..][..cv * len];
            affinity(qi, ki, cq, len, &mut p);
            if let Some(dv) = dv.as_mut() {
                gemm(Trans::No, Trans::No, cv, len, len, T::one(), gi, &p, T::zero(), &mut dv.data_mut()[ni * cv * len..][..cv * len]);
            }
            if dq.is_none() && dk.is_none() {
                continue;
            }
            // dP = dOᵀ·V, then softmax backward in place: dE = P ⊙ (dP − rowsum(dP ⊙ P))
            gemm(Trans::Yes, Trans::No, len, cv, len, T::one(), gi, vi, T::zero(), &mut dp);
            for (prow, drow) in p.chunks(len).zip(dp.chunks_mut(len)) {
                let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                for (d, &pv) in drow.iter_mut().zip(prow) {
                    *d = pv * (*d - dot);
                }
            }
            if let Some(dq) = dq.as_mut() {
                gemm(Trans::No, Trans::Yes, cq, len, len, T::one(), ki, &dp, T::zero(), &mut dq.data_mut()[ni * cq * len..][..cq * len]);
            }
            if let Some(dk) = dk.as_mut() {
                gemm(Trans::No, Trans::No, cq, len, len, T::one(), qi, &dp, T::zero(), &mut dk.data_mut()[ni * cq * len..][..cq * len]);
            }
        }
        vec![dq, dk, dv]
    }))
}

/// Position attention: `y = x + α · aggregate(q(x), k(x), v(x))`.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub alpha: ParamId,
    pub reduction: usize,
}

impl SpatialAttention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, r: usize) -> Result<Self> {
        let cr = reduced(c, r)?;
        Ok(SpatialAttention {
            query: b.scoped("query", |b| Conv2d::new(b, c, cr, 1, ConvGeom::UNIT, true)),
            key: b.scoped("key", |b| Conv2d::new(b, c, cr, 1, ConvGeom::UNIT, true)),
            value: b.scoped("value", |b| Conv2d::new(b, c, c, 1, ConvGeom::UNIT, true)),
            alpha: b.param("alpha", Tensor::zeros(&[1])),
            reduction: r,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let q = self.query.forward(cx, x)?;
        let k = self.key.forward(cx, x)?;
        let v = self.value.forward(cx, x)?;
        let o = spatial_aggregate(cx.graph, &q, &k, &v)?;
        let alpha = cx.param(self.alpha);
        let scaled = ops::scale_by(cx.graph, &alpha, &o)?;
        ops::add(cx.graph, x, &scaled)
    }

    /// Affinity matrices `[N, L, L]` for inspection.
    pub fn affinity_of<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Tensor<T>> {
        let q = self.query.forward(cx, x)?;
        let k = self.key.forward(cx, x)?;
        let (n, cq, h, w) = q.value().dims4()?;
        let len = h * w;
        let mut out = Tensor::zeros(&[n, len, len]);
        for ni in 0..n {
            affinity(
                &q.value().data()[ni * cq * len..][..cq * len],
                &k.value().data()[ni * cq * len..][..cq * len],
                cq,
                len,
                &mut out.data_mut()[ni * len * len..][..len * len],
            );
        }
        Ok(out)
    }
}

/// Squeeze-excitation style channel gate: `y = x ⊙ σ(W2·relu(W1·gap(x)))`.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub fc1: Linear,
    pub fc2: Linear,
    pub reduction: usize,
}

impl ChannelAttention {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, r: usize) -> Result<Self> {
        let cr = reduced(c, r)?;
        Ok(ChannelAttention {
            fc1: b.scoped("fc1", |b| Linear::fan_in(b, c, cr)),
            fc2: b.scoped("fc2", |b| Linear::fan_in(b, cr, c)),
            reduction: r,
        })
    }

    /// Per-channel weights in (0, 1), shape `[N, C]`.
    pub fn weights<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let s = ops::global_avg_pool(cx.graph, x)?;
        let z = self.fc1.forward(cx, &s)?;
        let z = ops::relu(cx.graph, &z);
        let z = self.fc2.forward(cx, &z)?;
        Ok(ops::sigmoid(cx.graph, &z))
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = self.weights(cx, x)?;
        ops::scale_channels(cx.graph, x, &w)
    }
}

/// Parameter ids of an attention module, for tests and tooling.
pub fn param_ids(sam: &SpatialAttention) -> Vec<ParamId> {
    let mut ids = Vec::new();
    for c in [&sam.query, &sam.key, &sam.value] {
        ids.push(c.weight);
        ids.extend(c.bias);
    }
    ids.push(sam.alpha);
    ids
}
