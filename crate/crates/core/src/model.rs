//! The full two-branch network with its classifier heads.

use alloc::vec::Vec;

use crate::attention::AttentionConfig;
use crate::autograd::{Graph, Var};
use crate::backbone::{BackboneConfig, SharedNet};
use crate::branches::{assemble_descriptor, Descriptor, GlobalBranch, GlobalOutput, LocalBranch, LocalOutput};
use crate::error::{shape_err, Error, Result};
use crate::losses::ClassifierHead;
use crate::nn::{Builder, Ctx, Kind, ParamStore};
use crate::rng;
use crate::tensor::{Real, Tensor};

/// Architecture switches and sizes.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub num_parts: usize,
    pub global_branch: bool,
    pub use_attention: bool,
    /// One head on the concatenated stripes; otherwise one head per stripe.
    pub single_id_loss: bool,
    /// Scale each descriptor row to unit length at matching time.
    pub normalize: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            backbone: BackboneConfig::default(),
            attention: AttentionConfig::default(),
            num_parts: 4,
            global_branch: true,
            use_attention: true,
            single_id_loss: true,
            normalize: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        let h = self.backbone.shared_size().0;
        if self.num_parts == 0 || !h.is_multiple_of(self.num_parts) {
            return Err(Error::Indivisible { height: h, parts: self.num_parts });
        }
        Ok(())
    }

    pub fn global_dim(&self) -> usize {
        if self.global_branch {
            self.backbone.embedding_dim()
        } else {
            0
        }
    }

    pub fn local_dim(&self) -> usize {
        self.num_parts * self.backbone.embedding_dim()
    }

    pub fn descriptor_dim(&self) -> usize {
        self.global_dim() + self.local_dim()
    }
}

/// Parameter names under this prefix belong to classifier heads.
pub const HEAD_PREFIX: &str = "head.";

// init stream keys, one per component so toggles leave the others untouched
const INIT: u64 = 0x1A17;

/// Layers of the network; parameters live in the owning [`PlrOsNet`]'s store.
#[derive(Clone, Debug)]
pub struct Modules {
    pub shared: SharedNet,
    pub global: Option<GlobalBranch>,
    pub local: LocalBranch,
    pub global_head: Option<ClassifierHead>,
    /// One head, or one per stripe.
    pub local_heads: Vec<ClassifierHead>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput<T> {
    pub shared: Var<T>,
    pub global: Option<GlobalOutput<T>>,
    pub local: LocalOutput<T>,
}

impl Modules {
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, images: &Var<T>) -> Result<ModelOutput<T>> {
        let shared = self.shared.forward(cx, images, true)?;
        let global = self.global.as_ref().map(|b| b.forward(cx, &shared)).transpose()?;
        let local = self.local.forward(cx, &shared)?;
        Ok(ModelOutput { shared, global, local })
    }
}

#[derive(Clone, Debug)]
pub struct PlrOsNet<T> {
    pub cfg: ModelConfig,
    pub num_classes: usize,
    pub modules: Modules,
    pub store: ParamStore<T>,
}

impl<T: Real> PlrOsNet<T> {
    pub fn new(cfg: &ModelConfig, num_classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let mut store = ParamStore::new();
        let bcfg = &cfg.backbone;
        let mut r_trunk = rng::stream(seed, &[INIT, 0]);
        let mut r_attn = rng::stream(seed, &[INIT, 1]);
        let mut r_global = rng::stream(seed, &[INIT, 2]);
        let mut r_local = rng::stream(seed, &[INIT, 3]);
        let mut r_head = rng::stream(seed, &[INIT, 4]);

        let shared = {
            let mut b = Builder::new(&mut store, &mut r_trunk);
            let attn = cfg.use_attention.then_some((&cfg.attention, &mut r_attn));
            b.scoped("shared", |b| SharedNet::new(b, bcfg, attn))?
        };
        let global = if cfg.global_branch {
            let mut b = Builder::new(&mut store, &mut r_global);
            Some(b.scoped("global", |b| GlobalBranch::new(b, bcfg))?)
        } else {
            None
        };
        let local = {
            let mut b = Builder::new(&mut store, &mut r_local);
            b.scoped("local", |b| LocalBranch::new(b, bcfg, cfg.num_parts))?
        };
        let dim = bcfg.embedding_dim();
        let mut b = Builder::new(&mut store, &mut r_head);
        let global_head = cfg
            .global_branch
            .then(|| b.scoped("head", |b| b.scoped("global", |b| ClassifierHead::new(b, dim, num_classes))));
        let local_heads = if cfg.single_id_loss {
            alloc::vec![b.scoped("head", |b| b.scoped("local", |b| ClassifierHead::new(b, cfg.num_parts * dim, num_classes)))]
        } else {
            (0..cfg.num_parts)
                .map(|p| {
                    b.scoped("head", |b| {
                        b.scoped(&alloc::format!("part{}", p + 1), |b| ClassifierHead::new(b, dim, num_classes))
                    })
                })
                .collect()
        };
        Ok(PlrOsNet {
            cfg: cfg.clone(),
            num_classes,
            modules: Modules { shared, global, local, global_head, local_heads },
            store,
        })
    }

    /// Trainable scalars of the feature extractor (trunk, attention, branches),
    /// excluding classifier heads, whose size depends on the training set.
    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable(None) - self.count_head_parameters()
    }

    pub fn count_head_parameters(&self) -> usize {
        self.store.count_trainable(Some(HEAD_PREFIX))
    }

    /// Forward on a fresh inference graph with batch-norm in eval mode.
    pub fn infer(&mut self, images: Tensor<T>) -> Result<ModelOutput<T>> {
        let g = Graph::inference();
        let mut cx = Ctx::new(&g, &mut self.store, false);
        let x = cx.graph.constant(images);
        self.modules.forward(&mut cx, &x)
    }

    /// Matching descriptors `[f ‖ g]` (or `g` alone without the global branch).
    pub fn descriptors(&mut self, images: Tensor<T>) -> Result<Descriptor<T>> {
        let out = self.infer(images)?;
        let f = out.global.as_ref().map(|o| o.f.value().clone());
        assemble_descriptor(f.as_ref(), out.local.g.value(), self.cfg.normalize)
    }

    /// Class activation maps for one image: the global map (if the branch
    /// exists) and one map per stripe feature, each `[h, w]` at branch resolution.
    ///
    /// Channel weights are the classifier row of the predicted class; for the
    /// single local head the row is sliced into per-stripe blocks.
    pub fn activation_maps(&mut self, image: Tensor<T>) -> Result<ActivationMaps<T>> {
        if image.shape()[0] != 1 {
            return Err(shape_err("activation_maps", "expects a batch of one image"));
        }
        let g = Graph::inference();
        let mut cx = Ctx::new(&g, &mut self.store, false);
        let x = cx.graph.constant(image);
        let out = self.modules.forward(&mut cx, &x)?;
        let (_, c, h, w) = out.local.map.value().dims4()?;
        let global = match (&out.global, &self.modules.global_head) {
            (Some(o), Some(head)) => {
                let logits = head.logits(&mut cx, &o.f)?;
                let cls = argmax(logits.value().row(0));
                let wrow = cx.store.get(head.linear.weight).row(cls).to_vec();
                Some(weighted_map(o.map.value().data(), &wrow, c, h * w))
            }
            _ => None,
        };
        let mut parts = Vec::with_capacity(self.cfg.num_parts);
        let lmap = out.local.map.value().data();
        if self.modules.local_heads.len() == 1 {
            let head = &self.modules.local_heads[0];
            let logits = head.logits(&mut cx, &out.local.g)?;
            let cls = argmax(logits.value().row(0));
            let wrow = cx.store.get(head.linear.weight).row(cls).to_vec();
            for p in 0..self.cfg.num_parts {
                parts.push(weighted_map(lmap, &wrow[p * c..(p + 1) * c], c, h * w));
            }
        } else {
            for (head, pv) in self.modules.local_heads.iter().zip(&out.local.parts.parts) {
                let logits = head.logits(&mut cx, pv)?;
                let cls = argmax(logits.value().row(0));
                let wrow = cx.store.get(head.linear.weight).row(cls).to_vec();
                parts.push(weighted_map(lmap, &wrow, c, h * w));
            }
        }
        Ok(ActivationMaps { height: h, width: w, global, parts })
    }

    /// Copies every same-named, same-shaped entry of `source` (via `rename`)
    /// into this model; returns how many were copied.
    pub fn import_matching(&mut self, source: &[(alloc::string::String, Tensor<T>)], rename: impl Fn(&str) -> Option<alloc::string::String>) -> usize {
        let mut n = 0;
        for (name, t) in source {
            if let Some(target) = rename(name) {
                if let Some(id) = self.store.find(&target) {
                    if self.store.get(id).shape() == t.shape() {
                        *self.store.get_mut(id) = t.clone();
                        n += 1;
                    }
                }
            }
        }
        n
    }

    /// Names of trainable parameters.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.store.ids().filter(|&id| self.store.kind(id) == Kind::Param).map(|id| self.store.name(id)).collect()
    }
}

fn argmax<T: Real>(row: &[T]) -> usize {
    (0..row.len()).fold(0, |b, j| if row[j] > row[b] { j } else { b })
}

/// `Σ_c w_c · M_c` over a `[C, hw]` map.
pub fn weighted_map<T: Real>(map: &[T], w: &[T], c: usize, hw: usize) -> Vec<T> {
    let mut out = alloc::vec![T::zero(); hw];
    for ch in 0..c {
        let plane = &map[ch * hw..(ch + 1) * hw];
        for (o, &m) in out.iter_mut().zip(plane) {
            *o = *o + w[ch] * m;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActivationMaps<T> {
    pub height: usize,
    pub width: usize,
    pub global: Option<Vec<T>>,
    pub parts: Vec<Vec<T>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn tiny() -> ModelConfig {
        let mut cfg = ModelConfig::default();
        cfg.backbone = BackboneConfig { input_height: 64, input_width: 32, ..BackboneConfig::default().with_width(0.25) };
        cfg
    }

    fn images(n: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_vec(&[n, 3, h, w], (0..n * 3 * h * w).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn shrunk_model_shapes() {
        let cfg = tiny();
        let mut m = PlrOsNet::<f32>::new(&cfg, 5, 0).unwrap();
        let out = m.infer(images(2, 64, 32, 1)).unwrap();
        assert_eq!(out.shared.shape(), &[2, 96, 4, 2]);
        assert_eq!(out.global.as_ref().unwrap().f.shape(), &[2, 128]);
        assert_eq!(out.local.g.shape(), &[2, 512]);
        assert_eq!(out.local.parts.len(), 4);
        let d = m.descriptors(images(2, 64, 32, 1)).unwrap();
        assert_eq!(d.d.shape(), &[2, 640]);
    }

    #[test]
    fn attention_toggle_leaves_trunk_init_alone() {
        let with = tiny();
        let without = ModelConfig { use_attention: false, ..tiny() };
        let mut a = PlrOsNet::<f32>::new(&with, 3, 9).unwrap();
        let mut b = PlrOsNet::<f32>::new(&without, 3, 9).unwrap();
        let g = Graph::inference();
        let x = images(2, 64, 32, 4);
        let ya = {
            let mut cx = Ctx::new(&g, &mut a.store, false);
            let xv = g.constant(x.clone());
            a.modules.shared.forward(&mut cx, &xv, false).unwrap()
        };
        let yb = {
            let mut cx = Ctx::new(&g, &mut b.store, false);
            let xv = g.constant(x);
            b.modules.shared.forward(&mut cx, &xv, true).unwrap()
        };
        assert_eq!(ya.value(), yb.value());
        assert!(a.count_parameters() > b.count_parameters());
    }

    #[test]
    fn disabling_global_branch_drops_its_parameters() {
        let on = PlrOsNet::<f32>::new(&tiny(), 3, 0).unwrap();
        let off = PlrOsNet::<f32>::new(&ModelConfig { global_branch: false, ..tiny() }, 3, 0).unwrap();
        let branch = on.store.count_trainable(Some("global."));
        assert!(branch > 0);
        assert_eq!(on.count_parameters() - off.count_parameters(), branch);
        assert_eq!(off.store.count_trainable(Some("global.")), 0);
    }

    #[test]
    fn multiple_id_mode_builds_part_heads() {
        let m = PlrOsNet::<f32>::new(&ModelConfig { single_id_loss: false, ..tiny() }, 7, 0).unwrap();
        assert_eq!(m.modules.local_heads.len(), 4);
        assert!(m.modules.local_heads.iter().all(|h| h.dim == 128 && h.classes == 7));
        // heads are not part of the extractor count
        let single = PlrOsNet::<f32>::new(&tiny(), 7, 0).unwrap();
        assert_eq!(m.count_parameters(), single.count_parameters());
    }

    #[test]
    fn branches_have_disjoint_weights() {
        let mut m = PlrOsNet::<f32>::new(&tiny(), 3, 0).unwrap();
        let x = images(2, 64, 32, 2);
        let before = m.infer(x.clone()).unwrap();
        let ids: Vec<_> = m.store.ids().filter(|&id| m.store.name(id).starts_with("global.")).collect();
        for id in ids {
            m.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v += 0.5);
        }
        let after = m.infer(x).unwrap();
        assert_eq!(before.local.g.value(), after.local.g.value());
        assert_ne!(before.global.unwrap().f.value(), after.global.unwrap().f.value());
    }

    #[test]
    fn width_increases_parameter_count() {
        let mut prev = 0;
        for wm in [0.25, 0.5, 1.0] {
            let mut cfg = tiny();
            cfg.backbone.width_multiplier = wm;
            let n = PlrOsNet::<f32>::new(&cfg, 3, 0).unwrap().count_parameters();
            assert!(n > prev);
            prev = n;
        }
    }

    #[test]
    fn activation_map_count_and_size() {
        let mut m = PlrOsNet::<f32>::new(&tiny(), 3, 0).unwrap();
        let maps = m.activation_maps(images(1, 64, 32, 3)).unwrap();
        assert!(maps.global.is_some());
        assert_eq!(maps.parts.len(), 4);
        assert_eq!(maps.parts[0].len(), 4 * 2);
    }

    #[test]
    fn zero_map_weights_to_zero() {
        let map = alloc::vec![0.0f32; 3 * 8];
        assert!(weighted_map(&map, &[1.0, -2.0, 0.5], 3, 8).iter().all(|&v| v == 0.0));
    }
}
