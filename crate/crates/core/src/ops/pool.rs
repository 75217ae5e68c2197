use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Max pooling with implicit `-inf` padding. Records the winning index per output.
pub fn max_pool2d<T: Real>(g: &Graph<T>, x: &Var<T>, k: usize, stride: usize, pad: usize) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    if h + 2 * pad < k || w + 2 * pad < k || stride == 0 || pad >= k {
        return Err(shape_err("max_pool2d", alloc::format!("input {:?} kernel {k}", x.shape())));
    }
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (w + 2 * pad - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut arg = vec![0u32; n * c * ho * wo];
    let xd = x.value().data();
    for plane in 0..n * c {
        let src = &xd[plane * h * w..(plane + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = T::neg_infinity();
                let mut bi = 0usize;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let idx = iy as usize * w + ix as usize;
                        if src[idx] > best {
                            best = src[idx];
                            bi = idx;
                        }
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out.data_mut()[o] = best;
                arg[o] = bi as u32;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok(g.record(out, &[x], move |dy, _| {
        let mut dx = Tensor::zeros(&shape);
        let per_in = h * w;
        let per_out = ho * wo;
        for (o, (&d, &a)) in dy.data().iter().zip(&arg).enumerate() {
            let plane = o / per_out;
            let i = plane * per_in + a as usize;
            dx.data_mut()[i] = dx.data_mut()[i] + d;
        }
        vec![Some(dx)]
    }))
}

/// Non-overlapping average pooling with window = stride = `k`.
pub fn avg_pool2d<T: Real>(g: &Graph<T>, x: &Var<T>, k: usize) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(shape_err("avg_pool2d", alloc::format!("input {:?} not divisible by {k}", x.shape())));
    }
    let (ho, wo) = (h / k, w / k);
    let scale = T::one() / T::from_usize(k * k).unwrap();
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let xd = x.value().data();
    for plane in 0..n * c {
        for iy in 0..h {
            for ix in 0..w {
                let o = (plane * ho + iy / k) * wo + ix / k;
                out.data_mut()[o] = out.data_mut()[o] + xd[(plane * h + iy) * w + ix] * scale;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok(g.record(out, &[x], move |dy, _| {
        let mut dx = Tensor::zeros(&shape);
        for plane in 0..n * c {
            for iy in 0..h {
                for ix in 0..w {
                    dx.data_mut()[(plane * h + iy) * w + ix] = dy.data()[(plane * ho + iy / k) * wo + ix / k] * scale;
                }
            }
        }
        vec![Some(dx)]
    }))
}

/// Spatial mean per channel: `[N,C,H,W] -> [N,C]`.
pub fn global_avg_pool<T: Real>(g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let hw = h * w;
    let inv = T::one() / T::from_usize(hw).unwrap();
    let data: Vec<T> = x.value().data().chunks(hw).map(|p| p.iter().copied().sum::<T>() * inv).collect();
    let out = Tensor::from_vec(&[n, c], data)?;
    let shape = x.shape().to_vec();
    Ok(g.record(out, &[x], move |dy, _| {
        let mut dx = Tensor::zeros(&shape);
        for (plane, &d) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
            plane.iter_mut().for_each(|v| *v = d * inv);
        }
        vec![Some(dx)]
    }))
}

/// Spatial max per channel: `[N,C,H,W] -> [N,C]`. Ties resolve to the first position.
pub fn global_max_pool<T: Real>(g: &Graph<T>, x: &Var<T>) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    let hw = h * w;
    let mut arg = Vec::with_capacity(n * c);
    let mut data = Vec::with_capacity(n * c);
    for p in x.value().data().chunks(hw) {
        let (bi, bv) = p.iter().enumerate().fold((0, T::neg_infinity()), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        arg.push(bi);
        data.push(bv);
    }
    let out = Tensor::from_vec(&[n, c], data)?;
    let shape = x.shape().to_vec();
    Ok(g.record(out, &[x], move |dy, _| {
        let mut dx = Tensor::zeros(&shape);
        for (plane, (&a, &d)) in arg.iter().zip(dy.data()).enumerate() {
            dx.data_mut()[plane * hw + a] = d;
        }
        vec![Some(dx)]
    }))
}

/// Splits the map into `parts` equal horizontal stripes, averages each per
/// channel and concatenates stripe vectors top to bottom: `[N, parts·C]`.
pub fn part_avg_pool<T: Real>(g: &Graph<T>, x: &Var<T>, parts: usize) -> Result<Var<T>> {
    let (n, c, h, w) = x.value().dims4()?;
    if parts == 0 || h % parts != 0 {
        return Err(Error::Indivisible { height: h, parts });
    }
    let rows = h / parts;
    let inv = T::one() / T::from_usize(rows * w).unwrap();
    let mut out = Tensor::zeros(&[n, parts * c]);
    let xd = x.value().data();
    for ni in 0..n {
        for ch in 0..c {
            let plane = &xd[(ni * c + ch) * h * w..][..h * w];
            for p in 0..parts {
                let s: T = plane[p * rows * w..(p + 1) * rows * w].iter().copied().sum();
                out.data_mut()[ni * parts * c + p * c + ch] = s * inv;
            }
        }
    }
    let shape = x.shape().to_vec();
    Ok(g.record(out, &[x], move |dy, _| {
        let mut dx = Tensor::zeros(&shape);
        for ni in 0..n {
            for ch in 0..c {
                let plane = &mut dx.data_mut()[(ni * c + ch) * h * w..][..h * w];
                for p in 0..parts {
                    let d = dy.data()[ni * parts * c + p * c + ch] * inv;
                    plane[p * rows * w..(p + 1) * rows * w].iter_mut().for_each(|v| *v = d);
                }
            }
        }
        vec![Some(dx)]
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::dot_const;
    use crate::ops::gradcheck::check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn max_pool_halves_and_picks_max() {
        let g = Graph::<f64>::inference();
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let x = g.constant(Tensor::from_vec(&[1, 1, 4, 4], data).unwrap());
        let y = max_pool2d(&g, &x, 3, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.value().data(), &[5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn pooling_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&mut rng, &[2, 3, 8, 4]);
        let p1 = rand_tensor(&mut rng, &[2, 3, 4, 2]);
        let p2 = rand_tensor(&mut rng, &[2, 3, 4, 2]);
        let p3 = rand_tensor(&mut rng, &[2, 3]);
        let p4 = rand_tensor(&mut rng, &[2, 12]);
        let err = check(&[x], |g, v| {
            let a = dot_const(g, &max_pool2d(g, &v[0], 3, 2, 1).unwrap(), &p1).unwrap();
            let b = dot_const(g, &avg_pool2d(g, &v[0], 2).unwrap(), &p2).unwrap();
            let c = dot_const(g, &global_avg_pool(g, &v[0]).unwrap(), &p3).unwrap();
            let d = dot_const(g, &global_max_pool(g, &v[0]).unwrap(), &p3).unwrap();
            let e = dot_const(g, &part_avg_pool(g, &v[0], 4).unwrap(), &p4).unwrap();
            crate::ops::weighted_sum(g, &[(&a, 1.0), (&b, 1.0), (&c, 1.0), (&d, 1.0), (&e, 1.0)]).unwrap()
        });
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn part_pool_rejects_ragged_split() {
        let g = Graph::<f32>::inference();
        let x = g.constant(Tensor::zeros(&[1, 2, 6, 4]));
        assert_eq!(part_avg_pool(&g, &x, 4).err(), Some(Error::Indivisible { height: 6, parts: 4 }));
    }
}
