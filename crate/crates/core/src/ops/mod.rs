//! Differentiable tensor operations recorded on a [`Graph`].

mod conv;
mod norm;
mod pool;

pub use conv::{conv2d, conv2d_forward, ConvGeom};
pub use norm::{batch_norm2d, BatchStats};
pub use pool::{
    avg_pool2d, global_avg_pool, global_max_pool, max_pool2d, part_avg_pool,
};

use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{gemm, Real, Tensor, Trans};

fn same_shape<T: Real>(op: &'static str, a: &Var<T>, b: &Var<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, alloc::format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

pub fn add<T: Real>(g: &Graph<T>, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    same_shape("add", a, b)?;
    let mut out = a.value().clone();
    out.add_assign(b.value());
    Ok(g.record(out, &[a, b], |dy, needs| {
        vec![needs[0].then(|| dy.clone()), needs[1].then(|| dy.clone())]
    }))
}

/// `c * x` for a fixed constant `c`.
pub fn scale<T: Real>(g: &Graph<T>, x: &Var<T>, c: T) -> Var<T> {
    let out = x.value().map(|v| v * c);
    g.record(out, &[x], move |dy, _| vec![Some(dy.map(|v| v * c))])
}

pub fn relu<T: Real>(g: &Graph<T>, x: &Var<T>) -> Var<T> {
    let out = Rc::new(x.value().map(|v| if v > T::zero() { v } else { T::zero() }));
    let saved = out.clone();
    g.record_rc(out, &[x], move |dy, _| {
        let mut dx = dy.clone();
        for (d, &o) in dx.data_mut().iter_mut().zip(saved.data()) {
            if o <= T::zero() {
                *d = T::zero();
            }
        }
        vec![Some(dx)]
    })
}

pub fn sigmoid<T: Real>(g: &Graph<T>, x: &Var<T>) -> Var<T> {
    let out = Rc::new(x.value().map(|v| T::one() / (T::one() + (-v).exp())));
    let saved = out.clone();
    g.record_rc(out, &[x], move |dy, _| {
        let mut dx = dy.clone();
        for (d, &s) in dx.data_mut().iter_mut().zip(saved.data()) {
            *d = *d * s * (T::one() - s);
        }
        vec![Some(dx)]
    })
}

/// `y[n,c,h,w] = x[n,c,h,w] * w[n,c]`.
pub fn scale_channels<T: Real>(g: &Graph<T>, x: &Var<T>, w: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, wd) = x.value().dims4()?;
    if w.shape() != [n, c] {
        return Err(shape_err("scale_channels", alloc::format!("weights {:?} for input {:?}", w.shape(), x.shape())));
    }
    let hw = h * wd;
    let mut out = x.value().clone();
    for (plane, &s) in out.data_mut().chunks_mut(hw).zip(w.value().data()) {
        plane.iter_mut().for_each(|v| *v = *v * s);
    }
    let xs = x.rc();
    let ws = w.rc();
    Ok(g.record(out, &[x, w], move |dy, needs| {
        let dx = needs[0].then(|| {
            let mut dx = dy.clone();
            for (plane, &s) in dx.data_mut().chunks_mut(hw).zip(ws.data()) {
                plane.iter_mut().for_each(|v| *v = *v * s);
            }
            dx
        });
        let dw = needs[1].then(|| {
            let data: Vec<T> = dy
                .data()
                .chunks(hw)
                .zip(xs.data().chunks(hw))
                .map(|(d, x)| d.iter().zip(x).map(|(&a, &b)| a * b).sum())
                .collect();
            Tensor::from_vec(&[n, c], data).unwrap()
        });
        vec![dx, dw]
    }))
}

/// `y = alpha * x` with a learnable one-element `alpha`.
pub fn scale_by<T: Real>(g: &Graph<T>, alpha: &Var<T>, x: &Var<T>) -> Result<Var<T>> {
    if alpha.value().numel() != 1 {
        return Err(shape_err("scale_by", "alpha must hold exactly one element"));
    }
    let a = alpha.value().item();
    let out = x.value().map(|v| v * a);
    let xs = x.rc();
    Ok(g.record(out, &[alpha, x], move |dy, needs| {
        let da = needs[0].then(|| {
            let s: T = dy.data().iter().zip(xs.data()).map(|(&d, &v)| d * v).sum();
            Tensor::scalar(s)
        });
        let dx = needs[1].then(|| dy.map(|v| v * a));
        vec![da, dx]
    }))
}

/// `Σ x ⊙ w` for a constant weight tensor. Handy as a scalar probe in gradient checks.
pub fn dot_const<T: Real>(g: &Graph<T>, x: &Var<T>, w: &Tensor<T>) -> Result<Var<T>> {
    if x.shape() != w.shape() {
        return Err(shape_err("dot_const", alloc::format!("{:?} vs {:?}", x.shape(), w.shape())));
    }
    let s: T = x.value().data().iter().zip(w.data()).map(|(&a, &b)| a * b).sum();
    let w = w.clone();
    Ok(g.record(Tensor::scalar(s), &[x], move |dy, _| {
        let d = dy.item();
        vec![Some(w.map(|v| v * d))]
    }))
}

/// Weighted sum of one-element tensors: `Σ c_i * x_i`.
pub fn weighted_sum<T: Real>(g: &Graph<T>, terms: &[(&Var<T>, T)]) -> Result<Var<T>> {
    let mut s = T::zero();
    for (v, c) in terms {
        if v.value().numel() != 1 {
            return Err(shape_err("weighted_sum", "terms must be scalars"));
        }
        s = s + *c * v.value().item();
    }
    let coefs: Vec<T> = terms.iter().map(|(_, c)| *c).collect();
    let vars: Vec<&Var<T>> = terms.iter().map(|(v, _)| *v).collect();
    Ok(g.record(Tensor::scalar(s), &vars, move |dy, needs| {
        let d = dy.item();
        coefs
            .iter()
            .zip(needs)
            .map(|(&c, &need)| need.then(|| Tensor::scalar(c * d)))
            .collect()
    }))
}

/// `y = x·wᵀ + b` with `x: [N, I]`, `w: [O, I]`, `b: [O]`.
pub fn linear<T: Real>(g: &Graph<T>, x: &Var<T>, w: &Var<T>, b: Option<&Var<T>>) -> Result<Var<T>> {
    let (n, i) = x.value().dims2()?;
    let (o, wi) = w.value().dims2()?;
    if wi != i {
        return Err(shape_err("linear", alloc::format!("input {:?} weight {:?}", x.shape(), w.shape())));
    }
    if let Some(b) = b {
        if b.shape() != [o] {
            return Err(shape_err("linear", alloc::format!("bias {:?} for {} outputs", b.shape(), o)));
        }
    }
    let mut out = Tensor::zeros(&[n, o]);
    gemm(Trans::No, Trans::Yes, n, i, o, T::one(), x.value().data(), w.value().data(), T::zero(), out.data_mut());
    if let Some(b) = b {
        for row in out.data_mut().chunks_mut(o) {
            for (v, &bb) in row.iter_mut().zip(b.value().data()) {
                *v = *v + bb;
            }
        }
    }
    let xs = x.rc();
    let ws = w.rc();
    let mut inputs = vec![x, w];
    if let Some(b) = b {
        inputs.push(b);
    }
    Ok(g.record(out, &inputs, move |dy, needs| {
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(&[n, i]);
            gemm(Trans::No, Trans::No, n, o, i, T::one(), dy.data(), ws.data(), T::zero(), dx.data_mut());
            dx
        });
        let dw = needs[1].then(|| {
            let mut dw = Tensor::zeros(&[o, i]);
            gemm(Trans::Yes, Trans::No, o, n, i, T::one(), dy.data(), xs.data(), T::zero(), dw.data_mut());
            dw
        });
        let mut res = vec![dx, dw];
        if needs.len() > 2 {
            let db = needs[2].then(|| {
                let mut db = Tensor::zeros(&[o]);
                for row in dy.data().chunks(o) {
                    for (a, &v) in db.data_mut().iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                db
            });
            res.push(db);
        }
        res
    }))
}

/// Concatenates rank-2 tensors along columns.
pub fn concat_cols<T: Real>(g: &Graph<T>, parts: &[&Var<T>]) -> Result<Var<T>> {
    let n = parts
        .first()
        .ok_or_else(|| shape_err("concat_cols", "no inputs"))?
        .value()
        .dims2()?
        .0;
    let mut widths = Vec::with_capacity(parts.len());
    for p in parts {
        let (r, c) = p.value().dims2()?;
        if r != n {
            return Err(shape_err("concat_cols", "row counts differ"));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut data = Vec::with_capacity(n * total);
    for row in 0..n {
        for p in parts {
            data.extend_from_slice(p.value().row(row));
        }
    }
    let out = Tensor::from_vec(&[n, total], data)?;
    Ok(g.record(out, parts, move |dy, needs| {
        let mut offset = 0;
        let mut res = Vec::with_capacity(widths.len());
        for (&w, &need) in widths.iter().zip(needs) {
            res.push(need.then(|| {
                let mut d = Vec::with_capacity(n * w);
                for row in 0..n {
                    d.extend_from_slice(&dy.row(row)[offset..offset + w]);
                }
                Tensor::from_vec(&[n, w], d).unwrap()
            }));
            offset += w;
        }
        res
    }))
}

/// Columns `[start, start+len)` of a rank-2 tensor.
pub fn narrow_cols<T: Real>(g: &Graph<T>, x: &Var<T>, start: usize, len: usize) -> Result<Var<T>> {
    let (n, c) = x.value().dims2()?;
    if start + len > c {
        return Err(shape_err("narrow_cols", alloc::format!("[{start}, {}) of {c} columns", start + len)));
    }
    let mut data = Vec::with_capacity(n * len);
    for row in 0..n {
        data.extend_from_slice(&x.value().row(row)[start..start + len]);
    }
    let out = Tensor::from_vec(&[n, len], data)?;
    Ok(g.record(out, &[x], move |dy, _| {
        let mut dx = Tensor::zeros(&[n, c]);
        for row in 0..n {
            dx.data_mut()[row * c + start..row * c + start + len].copy_from_slice(dy.row(row));
        }
        vec![Some(dx)]
    }))
}

#[cfg(test)]
pub(crate) mod gradcheck {
    //! Central-difference gradient checking used by op and module tests.
    use super::*;

    /// Relative error `‖a − n‖ / max(‖a‖, ‖n‖, floor)` between analytic and numeric gradients.
    pub fn rel_err(a: &[f64], n: &[f64]) -> f64 {
        let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
        diff / na.max(nn).max(1e-10)
    }

    /// Checks `d f / d inputs[k]` for every input against central differences.
    pub fn check<F>(inputs: &[Tensor<f64>], f: F) -> f64
    where
        F: Fn(&Graph<f64>, &[Var<f64>]) -> Var<f64>,
    {
        let g = Graph::new();
        let vars: Vec<Var<f64>> = inputs.iter().map(|t| g.leaf(Rc::new(t.clone()))).collect();
        let out = f(&g, &vars);
        let mut grads = g.backward(&out);
        let mut worst = 0.0f64;
        for (k, t) in inputs.iter().enumerate() {
            let analytic = grads.take(&vars[k]).unwrap_or_else(|| Tensor::zeros(t.shape()));
            let mut numeric = Vec::with_capacity(t.numel());
            let eps = 1e-6;
            for i in 0..t.numel() {
                let eval = |delta: f64| {
                    let gi = Graph::inference();
                    let vs: Vec<Var<f64>> = inputs
                        .iter()
                        .enumerate()
                        .map(|(j, tj)| {
                            let mut tj = tj.clone();
                            if j == k {
                                tj.data_mut()[i] += delta;
                            }
                            gi.constant(tj)
                        })
                        .collect();
                    f(&gi, &vs).value().item()
                };
                numeric.push((eval(eps) - eval(-eps)) / (2.0 * eps));
            }
            worst = worst.max(rel_err(analytic.data(), &numeric));
        }
        worst
    }
}
