use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::{Graph, Var};
use crate::error::{shape_err, Result};
use crate::tensor::{Real, Tensor};

/// Per-channel statistics of the batch a training-mode normalization saw.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, as folded into running estimates.
    pub var_unbiased: Vec<T>,
}

/// Batch normalization over `N·H·W` per channel.
///
/// In training mode statistics come from the batch and are returned so the
/// caller can fold them into running estimates. Otherwise `running` supplies
/// mean and variance, which are treated as constants.
pub fn batch_norm2d<T: Real>(
    g: &Graph<T>,
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    running: (&[T], &[T]),
    training: bool,
    eps: T,
) -> Result<(Var<T>, Option<BatchStats<T>>)> {
    let (n, c, h, w) = x.value().dims4()?;
    if gamma.shape() != [c] || beta.shape() != [c] || running.0.len() != c || running.1.len() != c {
        return Err(shape_err("batch_norm2d", alloc::format!("{c} channels, gamma {:?}", gamma.shape())));
    }
    let hw = h * w;
    let m = n * hw;
    let xd = x.value().data();
    let (mean, var, stats) = if training {
        if m < 2 {
            return Err(shape_err("batch_norm2d", "training-mode statistics need more than one value per channel"));
        }
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for ni in 0..n {
                s = s + xd[(ni * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            let mu = s / T::from_usize(m).unwrap();
            let mut ss = T::zero();
            for ni in 0..n {
                for &v in &xd[(ni * c + ch) * hw..][..hw] {
                    ss = ss + (v - mu) * (v - mu);
                }
            }
            mean[ch] = mu;
            var[ch] = ss / T::from_usize(m).unwrap();
        }
        let unbiased = var.iter().map(|&v| v * T::from_usize(m).unwrap() / T::from_usize(m - 1).unwrap()).collect();
        let stats = BatchStats { mean: mean.clone(), var_unbiased: unbiased };
        (mean, var, Some(stats))
    } else {
        (running.0.to_vec(), running.1.to_vec(), None)
    };
    let inv: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let gd = gamma.value().data();
    let bd = beta.value().data();
    for ni in 0..n {
        for ch in 0..c {
            let off = (ni * c + ch) * hw;
            for i in off..off + hw {
                let xh = (xd[i] - mean[ch]) * inv[ch];
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = gd[ch] * xh + bd[ch];
            }
        }
    }
    let xhat = Rc::new(xhat);
    let gs = gamma.rc();
    let y = g.record(out, &[x, gamma, beta], move |dy, needs| {
        let gd = gs.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for ni in 0..n {
            for ch in 0..c {
                let off = (ni * c + ch) * hw;
                for i in off..off + hw {
                    dgamma[ch] = dgamma[ch] + dy.data()[i] * xhat.data()[i];
                    dbeta[ch] = dbeta[ch] + dy.data()[i];
                }
            }
        }
        let dx = needs[0].then(|| {
            let mut dx = Tensor::zeros(xhat.shape());
            let mf = T::from_usize(m).unwrap();
            for ni in 0..n {
                for ch in 0..c {
                    let off = (ni * c + ch) * hw;
                    for i in off..off + hw {
                        dx.data_mut()[i] = if training {
                            gd[ch] * inv[ch] / mf * (mf * dy.data()[i] - dbeta[ch] - xhat.data()[i] * dgamma[ch])
                        } else {
                            gd[ch] * inv[ch] * dy.data()[i]
                        };
                    }
                }
            }
            dx
        });
        vec![
            dx,
            needs[1].then(|| Tensor::from_vec(&[c], dgamma.clone()).unwrap()),
            needs[2].then(|| Tensor::from_vec(&[c], dbeta.clone()).unwrap()),
        ]
    });
    Ok((y, stats))
}
