//! Optimization loop: PK batches, augmentation, per-branch losses, Adam with
//! an epoch-indexed warm-up/step schedule, and decoupled center updates.
//!
//! All randomness is drawn from streams keyed by `(seed, epoch, …)`, so a run
//! resumed from a saved state at epoch `e` continues exactly as the straight
//! run would have.

use alloc::vec::Vec;

use crate::attention::AttentionConfig;
use crate::autograd::Graph;
use crate::backbone::BackboneConfig;
use crate::dataset::{augment_train, make_pk_batches, stack, AugmentConfig, DatasetSplit, Image, PkBatch};
use crate::error::{Error, Result};
use crate::losses::{total_loss, update_centers, BranchTerms, Centers, IdHeads, LossBreakdown, LossWeights, TripletConfig};
use crate::model::{ModelConfig, PlrOsNet};
use crate::nn::Ctx;
use crate::optim::{Adam, AdamConfig};
use crate::rng;

/// Ablation switches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Toggles {
    pub global_branch: bool,
    pub attention: bool,
    pub single_id_loss: bool,
    pub soft_margin: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles { global_branch: true, attention: true, single_id_loss: true, soft_margin: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub decay_epochs: (usize, usize),
    pub base_lr: f64,
    pub peak_lr: f64,
    pub decay_lrs: (f64, f64),
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    pub toggles: Toggles,
    /// Hinge margin, used when `toggles.soft_margin` is off.
    pub margin: f64,
    pub loss_weights: LossWeights,
    pub center_alpha: f64,
    pub adam: AdamConfig,
    pub backbone: BackboneConfig,
    pub attention: AttentionConfig,
    pub num_parts: usize,
    pub normalize: bool,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 120,
            warmup_epochs: 20,
            decay_epochs: (60, 90),
            base_lr: 3.5e-5,
            peak_lr: 3.5e-4,
            decay_lrs: (3.5e-5, 3.5e-6),
            p: 16,
            k: 4,
            seed: 0,
            toggles: Toggles::default(),
            margin: 0.3,
            loss_weights: LossWeights::default(),
            center_alpha: 0.5,
            adam: AdamConfig::default(),
            backbone: BackboneConfig::default(),
            attention: AttentionConfig::default(),
            num_parts: 4,
            normalize: true,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The longer CUHK03 schedule.
    pub fn cuhk03() -> Self {
        TrainConfig { total_epochs: 150, warmup_epochs: 40, decay_epochs: (100, 130), ..TrainConfig::default() }
    }

    /// Short from-scratch recipe for the synthetic set: width 0.25, P=4 K=4,
    /// mean/std 0.5, no flip or erasing, and learning rates 30× the
    /// fine-tuning ones since nothing is pretrained. Warmup and decays sit at
    /// 1/6, 2/3 and 5/6 of `epochs`.
    pub fn desk_overfit(epochs: usize) -> Self {
        let mut cfg = TrainConfig {
            total_epochs: epochs,
            warmup_epochs: epochs / 6,
            decay_epochs: (epochs * 2 / 3, epochs * 5 / 6),
            base_lr: 1e-3,
            peak_lr: 1e-2,
            decay_lrs: (1e-3, 1e-4),
            p: 4,
            k: 4,
            backbone: BackboneConfig::default().with_width(0.25),
            ..TrainConfig::default()
        };
        cfg.augment.channel_mean = [0.5; 3];
        cfg.augment.channel_std = [0.5; 3];
        cfg.augment.flip_probability = 0.0;
        cfg.augment.erase_probability = 0.0;
        cfg
    }

    /// Replaces the epoch counts with the CUHK03 or the default schedule.
    pub fn with_schedule_for(mut self, cuhk03: bool) -> Self {
        let s = if cuhk03 { TrainConfig::cuhk03() } else { TrainConfig::default() };
        self.total_epochs = s.total_epochs;
        self.warmup_epochs = s.warmup_epochs;
        self.decay_epochs = s.decay_epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let (d0, d1) = self.decay_epochs;
        if !(self.warmup_epochs < d0 && d0 < d1 && d1 <= self.total_epochs) {
            return Err(Error::Config(alloc::format!(
                "schedule needs warmup ({}) < decay0 ({d0}) < decay1 ({d1}) <= total ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        for lr in [self.base_lr, self.peak_lr, self.decay_lrs.0, self.decay_lrs.1] {
            if !(lr.is_finite() && lr >= 0.0) {
                return Err(Error::Config("learning rates must be finite and >= 0".into()));
            }
        }
        if self.p == 0 || self.k == 0 {
            return Err(Error::Config("P and K must be positive".into()));
        }
        if !(self.margin >= 0.0) || !(self.center_alpha > 0.0) {
            return Err(Error::Config("margin must be >= 0 and center_alpha > 0".into()));
        }
        self.loss_weights.validate()?;
        self.augment.validate()?;
        if (self.augment.target_height, self.augment.target_width) != (self.backbone.input_height, self.backbone.input_width) {
            return Err(Error::Config("augment target size must match the backbone input size".into()));
        }
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone.clone(),
            attention: self.attention,
            num_parts: self.num_parts,
            global_branch: self.toggles.global_branch,
            use_attention: self.toggles.attention,
            single_id_loss: self.toggles.single_id_loss,
            normalize: self.normalize,
        }
    }

    pub fn triplet_config(&self) -> TripletConfig {
        TripletConfig { margin: self.margin, soft: self.toggles.soft_margin }
    }
}

/// Learning rate for a zero-based epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::EpochOutOfRange { epoch, total: cfg.total_epochs });
    }
    let (d0, d1) = cfg.decay_epochs;
    Ok(if epoch < cfg.warmup_epochs {
        cfg.base_lr + (cfg.peak_lr - cfg.base_lr) * epoch as f64 / cfg.warmup_epochs as f64
    } else if epoch < d0 {
        cfg.peak_lr
    } else if epoch < d1 {
        cfg.decay_lrs.0
    } else {
        cfg.decay_lrs.1
    })
}

/// Random access to decoded images by record index.
pub trait ImageSource {
    fn load(&self, index: usize) -> Result<Image>;
}

impl ImageSource for [Image] {
    fn load(&self, index: usize) -> Result<Image> {
        self.get(index).cloned().ok_or_else(|| Error::Image(alloc::format!("no image {index}")))
    }
}

impl ImageSource for Vec<Image> {
    fn load(&self, index: usize) -> Result<Image> {
        self.as_slice().load(index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    /// Global step counter, starting at 0.
    pub step: u64,
    pub lr: f64,
    pub losses: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Event {
    Step(StepLog),
    EpochEnd { epoch: usize, steps: usize, mean_total: f64 },
}

// stream keys
const K_SAMPLER: u64 = 0x5A;
const K_AUGMENT: u64 = 0xA6;

/// Everything a run mutates; saving this and the config is enough to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub cfg: TrainConfig,
    pub model: PlrOsNet<f32>,
    pub adam: Adam<f32>,
    pub centers_global: Option<Centers<f32>>,
    pub centers_local: Centers<f32>,
    /// Next epoch to run.
    pub epoch: usize,
    /// Steps taken so far.
    pub step: u64,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let mcfg = cfg.model_config();
        let model = PlrOsNet::new(&mcfg, num_classes, cfg.seed)?;
        let dim = mcfg.backbone.embedding_dim();
        Ok(TrainState {
            cfg: cfg.clone(),
            adam: Adam::new(cfg.adam),
            centers_global: cfg.toggles.global_branch.then(|| Centers::zeros(num_classes, dim, cfg.center_alpha)),
            centers_local: Centers::zeros(num_classes, mcfg.local_dim(), cfg.center_alpha),
            model,
            epoch: 0,
            step: 0,
        })
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.cfg.total_epochs
    }

    /// The PK batches an epoch uses.
    pub fn epoch_batches(&self, split: &DatasetSplit, epoch: usize) -> Result<Vec<PkBatch>> {
        make_pk_batches(split, self.cfg.p, self.cfg.k, rng::mix(self.cfg.seed, &[K_SAMPLER, epoch as u64]))
    }

    /// One optimization step on `batch`; `slot` numbers the batch within its epoch.
    pub fn train_step(
        &mut self,
        split: &DatasetSplit,
        source: &(impl ImageSource + ?Sized),
        batch: &PkBatch,
        epoch: usize,
        slot: usize,
    ) -> Result<StepLog> {
        let lr = lr_at(epoch, &self.cfg)?;
        let mut items = Vec::with_capacity(batch.indices.len());
        for (pos, &i) in batch.indices.iter().enumerate() {
            let mut r = rng::stream(self.cfg.seed, &[K_AUGMENT, epoch as u64, slot as u64, pos as u64]);
            items.push(augment_train(&source.load(i)?, &self.cfg.augment, &mut r)?);
        }
        let x = stack(&items)?;
        let labels: Vec<usize> = batch.indices.iter().map(|&i| split.train[i].person_id as usize).collect();
        let tcfg = self.cfg.triplet_config();

        let g = Graph::new();
        let m = &self.model.modules;
        let mut cx = Ctx::new(&g, &mut self.model.store, true);
        let xv = g.constant(x);
        let out = m.forward(&mut cx, &xv)?;
        let global_terms = match (&out.global, &m.global_head, &self.centers_global) {
            (Some(o), Some(h), Some(c)) => Some(BranchTerms { feature: &o.f, heads: IdHeads::Single(h), centers: c }),
            _ => None,
        };
        let local_heads = if m.local_heads.len() == 1 {
            IdHeads::Single(&m.local_heads[0])
        } else {
            IdHeads::PerPart(&m.local_heads, &out.local.parts)
        };
        let local_terms = BranchTerms { feature: &out.local.g, heads: local_heads, centers: &self.centers_local };
        let (loss, losses) = total_loss(&mut cx, global_terms.as_ref(), &local_terms, &labels, &self.cfg.loss_weights, &tcfg)?;
        if !losses.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: self.step as usize, indices: batch.indices.clone() });
        }
        let mut grads = g.backward(&loss);
        let param_grads = cx.param_grads(&mut grads);
        drop(cx);
        self.adam.step(&mut self.model.store, &param_grads, lr)?;
        if let (Some(o), Some(c)) = (&out.global, self.centers_global.as_mut()) {
            update_centers(o.f.value(), &labels, c)?;
        }
        update_centers(out.local.g.value(), &labels, &mut self.centers_local)?;
        let log = StepLog { epoch, step: self.step, lr, losses };
        self.step += 1;
        Ok(log)
    }

    /// Runs the next epoch.
    pub fn train_epoch(
        &mut self,
        split: &DatasetSplit,
        source: &(impl ImageSource + ?Sized),
        observer: &mut dyn FnMut(&Event),
    ) -> Result<()> {
        let epoch = self.epoch;
        lr_at(epoch, &self.cfg)?;
        let batches = self.epoch_batches(split, epoch)?;
        let mut sum = 0.0;
        for (slot, b) in batches.iter().enumerate() {
            let log = self.train_step(split, source, b, epoch, slot)?;
            sum += log.losses.total;
            observer(&Event::Step(log));
        }
        self.epoch += 1;
        observer(&Event::EpochEnd { epoch, steps: batches.len(), mean_total: sum / batches.len() as f64 });
        Ok(())
    }

    /// Runs the remaining epochs.
    pub fn run(&mut self, split: &DatasetSplit, source: &(impl ImageSource + ?Sized), observer: &mut dyn FnMut(&Event)) -> Result<()> {
        while !self.finished() {
            self.train_epoch(split, source, observer)?;
        }
        Ok(())
    }
}

/// Trains from scratch for `cfg.total_epochs` epochs.
pub fn train(
    split: &DatasetSplit,
    source: &(impl ImageSource + ?Sized),
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&Event),
) -> Result<TrainState> {
    if split.num_train_identities < cfg.p {
        return Err(Error::NotEnoughIdentities { requested: cfg.p, available: split.num_train_identities });
    }
    let mut st = TrainState::new(cfg, split.num_train_identities)?;
    st.run(split, source, observer)?;
    Ok(st)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::make_synthetic_dataset;

    #[test]
    fn schedule_points() {
        let cfg = TrainConfig::default();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-15;
        assert!(close(lr_at(0, &cfg).unwrap(), 3.5e-5));
        assert!(close(lr_at(10, &cfg).unwrap(), 1.925e-4));
        assert_eq!(lr_at(20, &cfg).unwrap(), 3.5e-4);
        assert_eq!(lr_at(59, &cfg).unwrap(), 3.5e-4);
        assert_eq!(lr_at(60, &cfg).unwrap(), 3.5e-5);
        assert_eq!(lr_at(90, &cfg).unwrap(), 3.5e-6);
        assert_eq!(lr_at(119, &cfg).unwrap(), 3.5e-6);
        assert!(matches!(lr_at(120, &cfg), Err(Error::EpochOutOfRange { epoch: 120, total: 120 })));
        let c = TrainConfig::cuhk03();
        assert_eq!(lr_at(40, &c).unwrap(), 3.5e-4);
        assert_eq!(lr_at(100, &c).unwrap(), 3.5e-5);
        assert_eq!(lr_at(130, &c).unwrap(), 3.5e-6);
        assert_eq!(TrainConfig::default().with_schedule_for(true).decay_epochs, (100, 130));
    }

    #[test]
    fn invalid_schedule_is_rejected() {
        let cfg = TrainConfig { warmup_epochs: 70, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }

    pub(crate) fn tiny_cfg() -> TrainConfig {
        let backbone = BackboneConfig { input_height: 64, input_width: 32, ..BackboneConfig::default().with_width(0.25) };
        TrainConfig {
            total_epochs: 3,
            warmup_epochs: 0,
            decay_epochs: (1, 2),
            p: 2,
            k: 2,
            backbone,
            augment: AugmentConfig { target_height: 64, target_width: 32, ..AugmentConfig::default() },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn runs_are_reproducible_and_resumable() {
        let data = make_synthetic_dataset(3, 2, 2, 1).unwrap();
        let cfg = tiny_cfg();
        let trace = |st: &mut TrainState, until: usize| {
            let mut v = Vec::new();
            while st.epoch < until {
                st.train_epoch(&data.split, &data.train_images, &mut |e| {
                    if let Event::Step(s) = e {
                        v.push((s.lr, s.losses.total));
                    }
                })
                .unwrap();
            }
            v
        };
        let mut a = TrainState::new(&cfg, 3).unwrap();
        let ta = trace(&mut a, 3);
        let mut b = TrainState::new(&cfg, 3).unwrap();
        let tb = trace(&mut b, 3);
        assert_eq!(ta, tb);
        assert!(ta.iter().all(|(_, l)| l.is_finite()));

        let mut c = TrainState::new(&cfg, 3).unwrap();
        let mut tc = trace(&mut c, 1);
        let mut resumed = c.clone();
        tc.extend(trace(&mut resumed, 3));
        assert_eq!(ta, tc);
    }

    #[test]
    fn ablations_train() {
        let data = make_synthetic_dataset(3, 2, 2, 2).unwrap();
        for toggles in [
            Toggles { global_branch: false, ..Toggles::default() },
            Toggles { single_id_loss: false, soft_margin: false, ..Toggles::default() },
            Toggles { attention: false, ..Toggles::default() },
        ] {
            let cfg = TrainConfig { toggles, total_epochs: 2, decay_epochs: (1, 2), ..tiny_cfg() };
            let mut logs = Vec::new();
            let st = train(&data.split, &data.train_images, &cfg, &mut |e| {
                if let Event::Step(s) = e {
                    logs.push(s.losses);
                }
            })
            .unwrap();
            assert!(logs.iter().all(|l| l.total.is_finite()));
            assert_eq!(logs[0].id_global.is_some(), toggles.global_branch);
            assert_eq!(st.model.modules.local_heads.len(), if toggles.single_id_loss { 1 } else { 4 });
        }
    }

    #[test]
    fn non_finite_loss_reports_batch() {
        let data = make_synthetic_dataset(3, 2, 2, 3).unwrap();
        let cfg = tiny_cfg();
        let mut st = TrainState::new(&cfg, 3).unwrap();
        let id = st.model.modules.local_heads[0].linear.bias.unwrap();
        st.model.store.get_mut(id).data_mut()[0] = f32::NAN;
        let batch = st.epoch_batches(&data.split, 0).unwrap().remove(0);
        match st.train_step(&data.split, &data.train_images, &batch, 0, 0) {
            Err(Error::NonFiniteLoss { indices, .. }) => assert_eq!(indices, batch.indices),
            other => panic!("{other:?}"),
        }
    }
}
