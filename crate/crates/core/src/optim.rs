//! Adam without weight decay.

use alloc::vec::Vec;

use num_traits::Float;

use crate::error::{shape_err, Result};
use crate::nn::{Kind, ParamStore};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Moment estimates for one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments<T> {
    pub step: u64,
    pub m: Tensor<T>,
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    /// Indexed like the parameter store; `None` until the first update.
    pub state: Vec<Option<Moments<T>>>,
}

impl<T: Real> Adam<T> {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam { cfg, state: Vec::new() }
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Option<Tensor<T>>], lr: f64) -> Result<()> {
        if grads.len() != store.len() {
            return Err(shape_err("Adam::step", alloc::format!("{} grads for {} params", grads.len(), store.len())));
        }
        self.state.resize(store.len(), None);
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let Some(grad) = &grads[id.0] else { continue };
            if store.kind(id) != Kind::Param {
                continue;
            }
            if grad.shape() != store.get(id).shape() {
                return Err(shape_err("Adam::step", alloc::format!("gradient shape for {}", store.name(id))));
            }
            let st = self.state[id.0].get_or_insert_with(|| Moments {
                step: 0,
                m: Tensor::zeros(grad.shape()),
                v: Tensor::zeros(grad.shape()),
            });
            st.step += 1;
            let t = st.step as i32;
            let bc1 = 1.0 - Float::powi(b1, t);
            let bc2_sqrt = Float::sqrt(1.0 - Float::powi(b2, t));
            let step_size = T::lit(lr / bc1);
            let (tb1, tb2) = (T::lit(b1), T::lit(b2));
            let (ob1, ob2) = (T::one() - tb1, T::one() - tb2);
            let eps = T::lit(self.cfg.eps);
            let bc2s = T::lit(bc2_sqrt);
            let p = store.get_mut(id).data_mut();
            for (((pv, &g), m), v) in p.iter_mut().zip(grad.data()).zip(st.m.data_mut()).zip(st.v.data_mut()) {
                *m = tb1 * *m + ob1 * g;
                *v = tb2 * *v + ob2 * g * g;
                let denom = Float::sqrt(*v) / bc2s + eps;
                *pv = *pv - step_size * *m / denom;
            }
        }
        Ok(())
    }
}
