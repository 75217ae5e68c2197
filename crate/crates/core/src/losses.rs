//! Training objectives: softmax identity loss (one head or one head per
//! stripe), batch-hard triplet loss, center loss, and their per-branch sum.

use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autograd::{Graph, Var};
use crate::branches::PartVectors;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Builder, Ctx, Linear};
use crate::ops;
use crate::tensor::{Real, Tensor};

/// Linear classifier over `dim`-d features; weight stored as `[classes, dim]`.
#[derive(Clone, Debug)]
pub struct ClassifierHead {
    pub linear: Linear,
    pub dim: usize,
    pub classes: usize,
}

impl ClassifierHead {
    /// Normal(0, 0.01) weights and zero bias.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, dim: usize, classes: usize) -> Self {
        ClassifierHead { linear: Linear::new(b, dim, classes, true, 0.01), dim, classes }
    }

    pub fn logits<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        self.linear.forward(cx, x)
    }
}

fn check_labels(y: &[usize], n: usize, classes: usize) -> Result<()> {
    if y.len() != n {
        return Err(shape_err("labels", alloc::format!("{} labels for {n} rows", y.len())));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::LabelOutOfRange { label: bad, num_classes: classes });
    }
    Ok(())
}

/// Mean over rows of `−log softmax(logits)[y]`.
pub fn cross_entropy<T: Real>(g: &Graph<T>, logits: &Var<T>, y: &[usize]) -> Result<Var<T>> {
    let (n, c) = logits.value().dims2()?;
    check_labels(y, n, c)?;
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut probs = Vec::with_capacity(n * c);
    let mut loss = T::zero();
    for (i, &yi) in y.iter().enumerate() {
        let row = logits.value().row(i);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
        let lse = mx + z.ln();
        loss = loss + (lse - row[yi]);
        probs.extend(row.iter().map(|&v| (v - lse).exp()));
    }
    let y = y.to_vec();
    Ok(g.record(Tensor::scalar(loss * inv_n), &[logits], move |dy, _| {
        let s = dy.item() * inv_n;
        let mut d = probs.clone();
        for (i, &yi) in y.iter().enumerate() {
            d[i * c + yi] = d[i * c + yi] - T::one();
        }
        d.iter_mut().for_each(|v| *v = *v * s);
        vec![Some(Tensor::from_vec(&[n, c], d).unwrap())]
    }))
}

pub fn id_loss_single<T: Real>(cx: &mut Ctx<'_, T>, g: &Var<T>, y: &[usize], head: &ClassifierHead) -> Result<Var<T>> {
    let logits = head.logits(cx, g)?;
    cross_entropy(cx.graph, &logits, y)
}

/// Sum over stripes of a softmax loss, each stripe with its own head.
pub fn id_loss_multiple<T: Real>(
    cx: &mut Ctx<'_, T>,
    parts: &PartVectors<T>,
    y: &[usize],
    heads: &[ClassifierHead],
) -> Result<Var<T>> {
    if heads.len() != parts.len() || heads.is_empty() {
        return Err(Error::Config(alloc::format!("{} heads for {} parts", heads.len(), parts.len())));
    }
    let mut terms = Vec::with_capacity(heads.len());
    for (p, h) in parts.parts.iter().zip(heads) {
        terms.push(id_loss_single(cx, p, y, h)?);
    }
    let weighted: Vec<(&Var<T>, T)> = terms.iter().map(|t| (t, T::one())).collect();
    ops::weighted_sum(cx.graph, &weighted)
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TripletConfig {
    /// Used only when `soft` is false.
    pub margin: f64,
    /// `ln(1 + exp(d_ap − d_an))` instead of `[d_ap − d_an + m]₊`.
    pub soft: bool,
}

impl Default for TripletConfig {
    fn default() -> Self {
        TripletConfig { margin: 0.3, soft: true }
    }
}

/// Euclidean distance matrix between rows of `x: [N, D]`.
pub fn pairwise_distances<T: Real>(x: &Tensor<T>) -> Result<Vec<T>> {
    let (n, _) = x.dims2()?;
    let mut d = vec![T::zero(); n * n];
    for i in 0..n {
        for j in i + 1..n {
            let s: T = x.row(i).iter().zip(x.row(j)).map(|(&a, &b)| (a - b) * (a - b)).sum();
            let v = Float::sqrt(s);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    Ok(d)
}

/// Hardest positive and negative per anchor, `None` when either is missing.
/// Ties keep the lowest index.
pub fn mine_hard(dist: &[impl PartialOrd + Copy], y: &[usize]) -> Vec<Option<(usize, usize)>> {
    let n = y.len();
    (0..n)
        .map(|i| {
            let mut pos: Option<usize> = None;
            let mut neg: Option<usize> = None;
            for j in 0..n {
                if j == i {
                    continue;
                }
                let d = dist[i * n + j];
                if y[j] == y[i] {
                    if pos.is_none_or(|p| d > dist[i * n + p]) {
                        pos = Some(j);
                    }
                } else if neg.is_none_or(|k| d < dist[i * n + k]) {
                    neg = Some(j);
                }
            }
            pos.zip(neg)
        })
        .collect()
}

/// Batch-hard triplet loss averaged over anchors that have both a positive
/// and a negative in the batch.
pub fn triplet_hard<T: Real>(g: &Graph<T>, x: &Var<T>, y: &[usize], cfg: &TripletConfig) -> Result<Var<T>> {
    let (n, dim) = x.value().dims2()?;
    if y.len() != n {
        return Err(shape_err("triplet_hard", alloc::format!("{} labels for {n} rows", y.len())));
    }
    let dist = pairwise_distances(x.value())?;
    let mined = mine_hard(&dist, y);
    let m = T::lit(cfg.margin);
    let valid: Vec<(usize, usize, usize, T)> = mined
        .iter()
        .enumerate()
        .filter_map(|(i, t)| t.map(|(p, k)| (i, p, k, dist[i * n + p] - dist[i * n + k])))
        .collect();
    if valid.is_empty() {
        return Err(Error::NoValidTriplets);
    }
    let inv = T::one() / T::from_usize(valid.len()).unwrap();
    let soft = cfg.soft;
    let mut loss = T::zero();
    // dℓ/dz per anchor
    let mut slopes = Vec::with_capacity(valid.len());
    for &(_, _, _, z) in &valid {
        if soft {
            let (l, s) = softplus(z);
            loss = loss + l;
            slopes.push(s);
        } else {
            let z = z + m;
            if z > T::zero() {
                loss = loss + z;
                slopes.push(T::one());
            } else {
                slopes.push(T::zero());
            }
        }
    }
    let xs = x.rc();
    Ok(g.record(Tensor::scalar(loss * inv), &[x], move |dy, _| {
        let s = dy.item() * inv;
        let mut dx = Tensor::zeros(&[n, dim]);
        let push = |a: usize, b: usize, coef: T, d: T, dx: &mut Tensor<T>| {
            if d <= T::zero() || coef == T::zero() {
                return;
            }
            let c = coef / d;
            for k in 0..dim {
                let diff = (xs.row(a)[k] - xs.row(b)[k]) * c;
                dx.data_mut()[a * dim + k] = dx.data()[a * dim + k] + diff;
                dx.data_mut()[b * dim + k] = dx.data()[b * dim + k] - diff;
            }
        };
        for (&(i, p, k, _), &slope) in valid.iter().zip(&slopes) {
            let c = slope * s;
            push(i, p, c, dist[i * n + p], &mut dx);
            push(i, k, -c, dist[i * n + k], &mut dx);
        }
        vec![Some(dx)]
    }))
}

/// Stable `(ln(1+eᶻ), σ(z))`.
fn softplus<T: Real>(z: T) -> (T, T) {
    let sig = T::one() / (T::one() + (-z).exp());
    let l = if z > T::zero() { z + (-z).exp().ln_1p() } else { z.exp().ln_1p() };
    (l, sig)
}

/// One center per identity for one supervised feature.
#[derive(Clone, Debug, PartialEq)]
pub struct Centers<T> {
    /// `[classes, dim]`.
    pub c: Tensor<T>,
    pub alpha: f64,
}

impl<T: Real> Centers<T> {
    pub fn zeros(classes: usize, dim: usize, alpha: f64) -> Self {
        Centers { c: Tensor::zeros(&[classes, dim]), alpha }
    }

    pub fn classes(&self) -> usize {
        self.c.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.c.shape()[1]
    }
}

fn check_centers<T: Real>(x: &Tensor<T>, y: &[usize], centers: &Centers<T>) -> Result<(usize, usize)> {
    let (n, d) = x.dims2()?;
    if d != centers.dim() {
        return Err(shape_err("center_loss", alloc::format!("feature dim {d}, center dim {}", centers.dim())));
    }
    check_labels(y, n, centers.classes())?;
    Ok((n, d))
}

/// `½ · mean_i ‖x_i − c_{y_i}‖²`; centers are constants for the gradient.
pub fn center_loss<T: Real>(g: &Graph<T>, x: &Var<T>, y: &[usize], centers: &Centers<T>) -> Result<Var<T>> {
    let (n, d) = check_centers(x.value(), y, centers)?;
    let inv = T::one() / T::from_usize(n).unwrap();
    let mut resid = Vec::with_capacity(n * d);
    for (i, &yi) in y.iter().enumerate() {
        resid.extend(x.value().row(i).iter().zip(centers.c.row(yi)).map(|(&a, &b)| a - b));
    }
    let half = T::lit(0.5);
    let loss = resid.iter().map(|&r| r * r).sum::<T>() * half * inv;
    Ok(g.record(Tensor::scalar(loss), &[x], move |dy, _| {
        let s = dy.item() * inv;
        vec![Some(Tensor::from_vec(&[n, d], resid.iter().map(|&r| r * s).collect()).unwrap())]
    }))
}

/// `c_j ← c_j − α · mean_{i: y_i = j}(c_j − x_i)` for every class in the batch.
pub fn update_centers<T: Real>(x: &Tensor<T>, y: &[usize], centers: &mut Centers<T>) -> Result<()> {
    let (_, d) = check_centers(x, y, centers)?;
    let alpha = T::lit(centers.alpha);
    let mut seen: Vec<usize> = y.to_vec();
    seen.sort_unstable();
    seen.dedup();
    for j in seen {
        let mut delta = vec![T::zero(); d];
        let mut count = 0usize;
        for (i, _) in y.iter().enumerate().filter(|(_, &l)| l == j) {
            count += 1;
            for (acc, (&c, &v)) in delta.iter_mut().zip(centers.c.row(j).iter().zip(x.row(i))) {
                *acc = *acc + (c - v);
            }
        }
        let scale = alpha / T::from_usize(count).unwrap();
        let row = &mut centers.c.data_mut()[j * d..(j + 1) * d];
        for (c, dl) in row.iter_mut().zip(delta) {
            *c = *c - scale * dl;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub triplet: f64,
    pub center: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { triplet: 1.0, center: 5e-4 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("triplet", self.triplet), ("center", self.center)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(alloc::format!("loss weight {name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

/// Identity supervision for one branch.
pub enum IdHeads<'a, T> {
    Single(&'a ClassifierHead),
    PerPart(&'a [ClassifierHead], &'a PartVectors<T>),
}

/// Everything one branch contributes to the objective.
pub struct BranchTerms<'a, T> {
    /// Feature used by the triplet and center terms (and the single head).
    pub feature: &'a Var<T>,
    pub heads: IdHeads<'a, T>,
    pub centers: &'a Centers<T>,
}

/// Scalar values of each component, for logging.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub id_global: Option<f64>,
    pub id_local: f64,
    pub triplet_global: Option<f64>,
    pub triplet_local: f64,
    pub center_global: Option<f64>,
    pub center_local: f64,
    pub total: f64,
}

struct BranchValue<T> {
    id: Var<T>,
    triplet: Var<T>,
    center: Var<T>,
}

fn branch_loss<T: Real>(
    cx: &mut Ctx<'_, T>,
    terms: &BranchTerms<'_, T>,
    y: &[usize],
    cfg: &TripletConfig,
) -> Result<BranchValue<T>> {
    let id = match terms.heads {
        IdHeads::Single(h) => id_loss_single(cx, terms.feature, y, h)?,
        IdHeads::PerPart(hs, parts) => id_loss_multiple(cx, parts, y, hs)?,
    };
    let triplet = triplet_hard(cx.graph, terms.feature, y, cfg)?;
    let center = center_loss(cx.graph, terms.feature, y, terms.centers)?;
    Ok(BranchValue { id, triplet, center })
}

/// Sum over branches of `id + γ_t·triplet + γ_c·center`.
pub fn total_loss<T: Real>(
    cx: &mut Ctx<'_, T>,
    global: Option<&BranchTerms<'_, T>>,
    local: &BranchTerms<'_, T>,
    y: &[usize],
    weights: &LossWeights,
    cfg: &TripletConfig,
) -> Result<(Var<T>, LossBreakdown)> {
    weights.validate()?;
    let gv = global.map(|t| branch_loss(cx, t, y, cfg)).transpose()?;
    let lv = branch_loss(cx, local, y, cfg)?;
    let (gt, gc) = (T::lit(weights.triplet), T::lit(weights.center));
    let mut parts: Vec<(&Var<T>, T)> = Vec::with_capacity(6);
    for b in gv.iter().chain(core::iter::once(&lv)) {
        parts.push((&b.id, T::one()));
        parts.push((&b.triplet, gt));
        parts.push((&b.center, gc));
    }
    let total = ops::weighted_sum(cx.graph, &parts)?;
    let f = |v: &Var<T>| v.value().item().to_f64().unwrap_or(f64::NAN);
    let breakdown = LossBreakdown {
        id_global: gv.as_ref().map(|b| f(&b.id)),
        id_local: f(&lv.id),
        triplet_global: gv.as_ref().map(|b| f(&b.triplet)),
        triplet_local: f(&lv.triplet),
        center_global: gv.as_ref().map(|b| f(&b.center)),
        center_local: f(&lv.center),
        total: f(&total),
    };
    Ok((total, breakdown))
}
