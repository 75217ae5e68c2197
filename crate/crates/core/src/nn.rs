//! Named parameter storage, the forward context, and the basic layers.

use alloc::format;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autograd::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::ops::{self, ConvGeom};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Updated by the optimizer.
    Param,
    /// State carried between steps but not trained (normalization statistics).
    Buffer,
}

#[derive(Clone, Debug)]
struct Entry<T> {
    name: String,
    value: Rc<Tensor<T>>,
    kind: Kind,
}

/// Flat, ordered map of named tensors.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<Entry<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new() }
    }

    pub fn add(&mut self, name: String, value: Tensor<T>, kind: Kind) -> ParamId {
        self.entries.push(Entry { name, value: Rc::new(value), kind });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Rc::make_mut(&mut self.entries[id.0].value)
    }

    pub fn rc(&self, id: ParamId) -> Rc<Tensor<T>> {
        self.entries[id.0].value.clone()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn kind(&self, id: ParamId) -> Kind {
        self.entries[id.0].kind
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Number of trainable scalars, optionally restricted to names with a prefix.
    pub fn count_trainable(&self, prefix: Option<&str>) -> usize {
        self.entries
            .iter()
            .filter(|e| e.kind == Kind::Param)
            .filter(|e| prefix.is_none_or(|p| e.name.starts_with(p)))
            .map(|e| e.value.numel())
            .sum()
    }

    /// Replaces a tensor by name, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self.find(name).ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.get(id).shape() != value.shape() {
            return Err(Error::Shape {
                op: "ParamStore::set",
                detail: format!("{name}: stored {:?}, given {:?}", self.get(id).shape(), value.shape()),
            });
        }
        self.entries[id.0].value = Rc::new(value);
        Ok(())
    }
}

/// Per-forward state: the graph, the store, mode, and the leaf cache that
/// makes a parameter used several times (a shared gate) a single leaf.
pub struct Ctx<'a, T: Real> {
    pub graph: &'a Graph<T>,
    pub store: &'a mut ParamStore<T>,
    pub training: bool,
    leaves: Vec<Option<Var<T>>>,
}

impl<'a, T: Real> Ctx<'a, T> {
    pub fn new(graph: &'a Graph<T>, store: &'a mut ParamStore<T>, training: bool) -> Self {
        let n = store.len();
        Ctx { graph, store, training, leaves: vec![None; n] }
    }

    pub fn param(&mut self, id: ParamId) -> Var<T> {
        if let Some(v) = &self.leaves[id.0] {
            return v.clone();
        }
        let v = self.graph.leaf(self.store.rc(id));
        self.leaves[id.0] = Some(v.clone());
        v
    }

    /// Gradients for every parameter that took part in the forward.
    pub fn param_grads(&self, grads: &mut Gradients<T>) -> Vec<Option<Tensor<T>>> {
        self.leaves
            .iter()
            .map(|leaf| leaf.as_ref().and_then(|v| grads.take(v)))
            .collect()
    }
}

/// Hierarchical names plus the initialization RNG.
pub struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, T: Real> Builder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Builder { store, rng, prefix: Vec::new() }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(String::from(name));
        let r = f(self);
        self.prefix.pop();
        r
    }

    fn full_name(&self, leaf: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(leaf);
        s
    }

    pub fn param(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add(name, value, Kind::Param)
    }

    pub fn buffer(&mut self, leaf: &str, value: Tensor<T>) -> ParamId {
        let name = self.full_name(leaf);
        self.store.add(name, value, Kind::Buffer)
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                T::lit(z * std)
            })
            .collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.random_range(-bound..bound))).collect();
        Tensor::from_vec(shape, data).unwrap()
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub geom: ConvGeom,
}

impl Conv2d {
    /// Kaiming-normal (fan-out, ReLU gain) initialization; bias starts at zero.
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        bias: bool,
    ) -> Self {
        let shape = [cout, cin / geom.groups, k, k];
        let std = Float::sqrt(2.0 / (cout * k * k) as f64);
        let w = b.normal(&shape, std);
        let weight = b.param("weight", w);
        let bias = bias.then(|| b.param("bias", Tensor::zeros(&[cout])));
        Conv2d { weight, bias, geom }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|id| cx.param(id));
        ops::conv2d(cx.graph, x, &w, b.as_ref(), self.geom)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm2d {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, c: usize) -> Self {
        BatchNorm2d {
            gamma: b.param("weight", Tensor::ones(&[c])),
            beta: b.param("bias", Tensor::zeros(&[c])),
            running_mean: b.buffer("running_mean", Tensor::zeros(&[c])),
            running_var: b.buffer("running_var", Tensor::ones(&[c])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let gamma = cx.param(self.gamma);
        let beta = cx.param(self.beta);
        let rm = cx.store.get(self.running_mean).data().to_vec();
        let rv = cx.store.get(self.running_var).data().to_vec();
        let (y, stats) = ops::batch_norm2d(cx.graph, x, &gamma, &beta, (&rm, &rv), cx.training, T::lit(self.eps))?;
        if let Some(stats) = stats {
            let m = T::lit(self.momentum);
            let one = T::one();
            for (r, &s) in cx.store.get_mut(self.running_mean).data_mut().iter_mut().zip(&stats.mean) {
                *r = (one - m) * *r + m * s;
            }
            for (r, &s) in cx.store.get_mut(self.running_var).data_mut().iter_mut().zip(&stats.var_unbiased) {
                *r = (one - m) * *r + m * s;
            }
        }
        Ok(y)
    }
}

/// Fully connected layer with `weight: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Normal(0, `std`) weights, zero bias.
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize, bias: bool, std: f64) -> Self {
        let w = b.normal(&[cout, cin], std);
        Linear { weight: b.param("weight", w), bias: bias.then(|| b.param("bias", Tensor::zeros(&[cout]))) }
    }

    /// Kaiming-uniform-style init scaled by fan-in, as used for small gating MLPs.
    pub fn fan_in<T: Real>(b: &mut Builder<'_, T>, cin: usize, cout: usize) -> Self {
        let bound = 1.0 / Float::sqrt(cin as f64);
        let w = b.uniform(&[cout, cin], bound);
        let bias = b.uniform(&[cout], bound);
        Linear { weight: b.param("weight", w), bias: Some(b.param("bias", bias)) }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = cx.param(self.weight);
        let b = self.bias.map(|id| cx.param(id));
        ops::linear(cx.graph, x, &w, b.as_ref())
    }
}

/// Convolution → batch norm → optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv2d,
    pub bn: BatchNorm2d,
    pub relu: bool,
}

impl ConvBn {
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        cin: usize,
        cout: usize,
        k: usize,
        geom: ConvGeom,
        relu: bool,
    ) -> Self {
        let conv = b.scoped("conv", |b| Conv2d::new(b, cin, cout, k, geom, false));
        let bn = b.scoped("bn", |b| BatchNorm2d::new(b, cout));
        ConvBn { conv, bn, relu }
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.conv.forward(cx, x)?;
        let y = self.bn.forward(cx, &y)?;
        Ok(if self.relu { ops::relu(cx.graph, &y) } else { y })
    }
}
