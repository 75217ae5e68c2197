//! Omni-scale residual trunk.
//!
//! A block reduces its input to a bottleneck width, runs `t` parallel streams
//! where stream `s` stacks `s` lightweight 3×3 units (pointwise conv followed
//! by depthwise 3×3), so each stream sees a larger receptive field. A single
//! gate shared by all streams (global average pool, bottleneck MLP, sigmoid)
//! reweights each stream's channels before they are summed, expanded back by
//! a pointwise conv, and added to the (projected when widths differ) input.
//! The block ends with a ReLU.
//!
//! Stride ledger for a 256×128 input: stem conv /2 and max-pool /2 give 64×32
//! at conv2, each transition halves again, so the shared map is 16×8. Branch
//! stages keep stride 1.

use alloc::vec::Vec;

use num_traits::Float;

use crate::attention::{AttentionConfig, ChannelAttention, SpatialAttention};
use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{Builder, ConvBn, Ctx, Linear};
use crate::ops::{self, ConvGeom};
use crate::tensor::Real;

/// Trunk widths and depths. Widths are given at full scale and multiplied by
/// `width_multiplier` (rounded up) when the network is built.
#[derive(Clone, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct BackboneConfig {
    /// Widths of stem, conv2, conv3 and conv4.
    pub stage_channels: [usize; 4],
    /// Blocks in conv2, conv3 and conv4.
    pub blocks_per_stage: [usize; 3],
    /// Number of streams `t` per block.
    pub streams: usize,
    /// Width of conv5, i.e. each branch's embedding.
    pub final_channels: usize,
    pub width_multiplier: f64,
    /// Bottleneck width is `out / bottleneck_reduction`.
    pub bottleneck_reduction: usize,
    /// Gate hidden width is `max(1, mid / gate_reduction)`.
    pub gate_reduction: usize,
    pub input_height: usize,
    pub input_width: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: [64, 256, 384, 512],
            blocks_per_stage: [2, 2, 2],
            streams: 4,
            final_channels: 512,
            width_multiplier: 1.0,
            bottleneck_reduction: 4,
            gate_reduction: 16,
            input_height: 256,
            input_width: 128,
        }
    }
}

/// Total downsampling of the shared trunk.
pub const TRUNK_STRIDE: usize = 16;

impl BackboneConfig {
    pub fn with_width(mut self, m: f64) -> Self {
        self.width_multiplier = m;
        self
    }

    fn scale(&self, c: usize) -> usize {
        let v = Float::ceil(self.width_multiplier * c as f64) as usize;
        v.max(1)
    }

    /// Built widths of stem, conv2, conv3, conv4.
    pub fn widths(&self) -> [usize; 4] {
        self.stage_channels.map(|c| self.scale(c))
    }

    /// Built width of the branch embedding.
    pub fn embedding_dim(&self) -> usize {
        self.scale(self.final_channels)
    }

    /// Spatial size of the shared map.
    pub fn shared_size(&self) -> (usize, usize) {
        (self.input_height / TRUNK_STRIDE, self.input_width / TRUNK_STRIDE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.contains(&0) || self.final_channels == 0 {
            return Err(Error::Config("all widths must be positive".into()));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        if self.streams == 0 || self.bottleneck_reduction == 0 || self.gate_reduction == 0 {
            return Err(Error::Config("streams and reductions must be >= 1".into()));
        }
        if self.blocks_per_stage.contains(&0) {
            return Err(Error::Config("each stage needs at least one block".into()));
        }
        if !self.input_height.is_multiple_of(TRUNK_STRIDE) || !self.input_width.is_multiple_of(TRUNK_STRIDE) || self.input_height == 0 {
            return Err(Error::Config(alloc::format!(
                "input {}x{} is not divisible by the trunk stride {TRUNK_STRIDE}",
                self.input_height, self.input_width
            )));
        }
        Ok(())
    }
}

/// Pointwise conv then depthwise 3×3, batch norm, ReLU.
#[derive(Clone, Debug)]
pub struct LiteConv {
    pub pointwise: crate::nn::Conv2d,
    pub depthwise: ConvBn,
}

impl LiteConv {
    fn new<T: Real>(b: &mut Builder<'_, T>, c: usize) -> Self {
        let pointwise = b.scoped("pw", |b| crate::nn::Conv2d::new(b, c, c, 1, ConvGeom::UNIT, false));
        let depthwise = b.scoped("dw", |b| ConvBn::new(b, c, c, 3, ConvGeom::new(1, 1, c), true));
        LiteConv { pointwise, depthwise }
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.pointwise.forward(cx, x)?;
        self.depthwise.forward(cx, &y)
    }

    fn param_count(c: usize) -> usize {
        c * c + 9 * c + 2 * c
    }
}

/// Aggregation gate shared by all streams of a block.
#[derive(Clone, Debug)]
pub struct Gate {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Gate {
    fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, hidden: usize) -> Self {
        Gate {
            fc1: b.scoped("fc1", |b| Linear::fan_in(b, c, hidden)),
            fc2: b.scoped("fc2", |b| Linear::fan_in(b, hidden, c)),
        }
    }

    /// Per-channel weights in (0, 1), `[N, C]`.
    pub fn weights<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let s = ops::global_avg_pool(cx.graph, x)?;
        let z = self.fc1.forward(cx, &s)?;
        let z = ops::relu(cx.graph, &z);
        let z = self.fc2.forward(cx, &z)?;
        Ok(ops::sigmoid(cx.graph, &z))
    }

    fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let w = self.weights(cx, x)?;
        ops::scale_channels(cx.graph, x, &w)
    }
}

/// Shape of one omni-scale block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub cin: usize,
    pub cout: usize,
    pub streams: usize,
    pub bottleneck_reduction: usize,
    pub gate_reduction: usize,
    /// Whether a 1×1 projection may be added when `cin != cout`.
    pub projection: bool,
}

impl BlockSpec {
    pub fn mid(&self) -> usize {
        (self.cout / self.bottleneck_reduction).max(1)
    }

    pub fn gate_hidden(&self) -> usize {
        (self.mid() / self.gate_reduction).max(1)
    }

    /// Closed-form count of trainable scalars for this block.
    pub fn param_count(&self) -> usize {
        let (cin, cout, mid, h) = (self.cin, self.cout, self.mid(), self.gate_hidden());
        let units = self.streams * (self.streams + 1) / 2;
        let reduce = cin * mid + 2 * mid;
        let streams = units * LiteConv::param_count(mid);
        let gate = mid * h + h + h * mid + mid;
        let expand = mid * cout + 2 * cout;
        let proj = if cin != cout { cin * cout + 2 * cout } else { 0 };
        reduce + streams + gate + expand + proj
    }
}

#[derive(Clone, Debug)]
pub struct OsBlock {
    pub spec: BlockSpec,
    pub reduce: ConvBn,
    pub streams: Vec<Vec<LiteConv>>,
    pub gate: Gate,
    pub expand: ConvBn,
    pub projection: Option<ConvBn>,
}

impl OsBlock {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, spec: BlockSpec) -> Result<Self> {
        if spec.streams == 0 {
            return Err(Error::Config("a block needs at least one stream".into()));
        }
        if spec.cin != spec.cout && !spec.projection {
            return Err(Error::Config(alloc::format!(
                "block maps {} to {} channels but has no projection",
                spec.cin, spec.cout
            )));
        }
        let mid = spec.mid();
        let reduce = b.scoped("conv1", |b| ConvBn::new(b, spec.cin, mid, 1, ConvGeom::UNIT, true));
        let streams = (1..=spec.streams)
            .map(|s| {
                b.scoped(&alloc::format!("stream{s}"), |b| {
                    (0..s).map(|u| b.scoped(&alloc::format!("{u}"), |b| LiteConv::new(b, mid))).collect()
                })
            })
            .collect();
        let gate = b.scoped("gate", |b| Gate::new(b, mid, spec.gate_hidden()));
        let expand = b.scoped("conv3", |b| ConvBn::new(b, mid, spec.cout, 1, ConvGeom::UNIT, false));
        let projection = (spec.cin != spec.cout)
            .then(|| b.scoped("downsample", |b| ConvBn::new(b, spec.cin, spec.cout, 1, ConvGeom::UNIT, false)));
        Ok(OsBlock { spec, reduce, streams, gate, expand, projection })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let c = x.value().dims4()?.1;
        if c != self.spec.cin {
            return Err(shape_err("omni_scale_block", alloc::format!("expected {} channels, got {c}", self.spec.cin)));
        }
        let r = self.reduce.forward(cx, x)?;
        let mut acc: Option<Var<T>> = None;
        for stream in &self.streams {
            let mut y = r.clone();
            for unit in stream {
                y = unit.forward(cx, &y)?;
            }
            let gated = self.gate.forward(cx, &y)?;
            acc = Some(match acc {
                None => gated,
                Some(a) => ops::add(cx.graph, &a, &gated)?,
            });
        }
        let y = self.expand.forward(cx, &acc.expect("at least one stream"))?;
        let identity = match &self.projection {
            Some(p) => p.forward(cx, x)?,
            None => x.clone(),
        };
        let sum = ops::add(cx.graph, &y, &identity)?;
        Ok(ops::relu(cx.graph, &sum))
    }
}

fn stage<T: Real>(b: &mut Builder<'_, T>, cfg: &BackboneConfig, cin: usize, cout: usize, blocks: usize) -> Result<Vec<OsBlock>> {
    (0..blocks)
        .map(|i| {
            let spec = BlockSpec {
                cin: if i == 0 { cin } else { cout },
                cout,
                streams: cfg.streams,
                bottleneck_reduction: cfg.bottleneck_reduction,
                gate_reduction: cfg.gate_reduction,
                projection: true,
            };
            b.scoped(&alloc::format!("{i}"), |b| OsBlock::new(b, spec))
        })
        .collect()
}

fn run<T: Real>(blocks: &[OsBlock], cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
    let mut y = x.clone();
    for blk in blocks {
        y = blk.forward(cx, &y)?;
    }
    Ok(y)
}

/// SAM followed by CAM at one insertion site.
#[derive(Clone, Debug)]
pub struct AttentionSite {
    pub sam: SpatialAttention,
    pub cam: ChannelAttention,
}

impl AttentionSite {
    fn new<T: Real>(b: &mut Builder<'_, T>, c: usize, cfg: &AttentionConfig) -> Result<Self> {
        Ok(AttentionSite {
            sam: b.scoped("sam", |b| SpatialAttention::new(b, c, cfg.sam_reduction))?,
            cam: b.scoped("cam", |b| ChannelAttention::new(b, c, cfg.cam_reduction))?,
        })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = self.sam.forward(cx, x)?;
        self.cam.forward(cx, &y)
    }
}

/// Stem, conv2, transition, conv3, transition; optional attention after conv2 and conv3.
#[derive(Clone, Debug)]
pub struct SharedNet {
    pub cfg: BackboneConfig,
    pub stem: ConvBn,
    pub conv2: Vec<OsBlock>,
    pub transition1: ConvBn,
    pub conv3: Vec<OsBlock>,
    pub transition2: ConvBn,
    /// Attention after conv2 and after conv3, when built.
    pub attention: Option<[AttentionSite; 2]>,
}

impl SharedNet {
    /// Trunk parameters are drawn from `b` first; attention (if any) from
    /// `attn`, so toggling attention leaves the trunk initialization unchanged.
    pub fn new<T: Real>(
        b: &mut Builder<'_, T>,
        cfg: &BackboneConfig,
        attention: Option<(&AttentionConfig, &mut rand_chacha::ChaCha8Rng)>,
    ) -> Result<Self> {
        cfg.validate()?;
        let [c0, c1, c2, _] = cfg.widths();
        let stem = b.scoped("conv1", |b| ConvBn::new(b, 3, c0, 7, ConvGeom::new(2, 3, 1), true));
        let conv2 = b.scoped("conv2", |b| stage(b, cfg, c0, c1, cfg.blocks_per_stage[0]))?;
        let transition1 = b.scoped("transition1", |b| ConvBn::new(b, c1, c1, 1, ConvGeom::UNIT, true));
        let conv3 = b.scoped("conv3", |b| stage(b, cfg, c1, c2, cfg.blocks_per_stage[1]))?;
        let transition2 = b.scoped("transition2", |b| ConvBn::new(b, c2, c2, 1, ConvGeom::UNIT, true));
        let attention = match attention {
            None => None,
            Some((acfg, rng)) => {
                let mut ab = Builder::new(&mut *b.store, rng);
                let s2 = ab.scoped("attention2", |ab| AttentionSite::new(ab, c1, acfg))?;
                let s3 = ab.scoped("attention3", |ab| AttentionSite::new(ab, c2, acfg))?;
                Some([s2, s3])
            }
        };
        Ok(SharedNet { cfg: cfg.clone(), stem, conv2, transition1, conv3, transition2, attention })
    }

    /// Forward to the stride-16 shared map. `attention_on = false` skips the
    /// attention sites even when they were built.
    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, images: &Var<T>, attention_on: bool) -> Result<Var<T>> {
        let (_, c, h, w) = images.value().dims4()?;
        if c != 3 {
            return Err(shape_err("shared_forward", alloc::format!("expected 3 input channels, got {c}")));
        }
        if h % TRUNK_STRIDE != 0 || w % TRUNK_STRIDE != 0 || h == 0 || w == 0 {
            return Err(shape_err(
                "shared_forward",
                alloc::format!("input {h}x{w} is not divisible by the trunk stride {TRUNK_STRIDE}"),
            ));
        }
        let x = self.stem.forward(cx, images)?;
        let x = ops::max_pool2d(cx.graph, &x, 3, 2, 1)?;
        let mut x = run(&self.conv2, cx, &x)?;
        if let (true, Some(sites)) = (attention_on, &self.attention) {
            x = sites[0].forward(cx, &x)?;
        }
        let x = self.transition1.forward(cx, &x)?;
        let x = ops::avg_pool2d(cx.graph, &x, 2)?;
        let mut x = run(&self.conv3, cx, &x)?;
        if let (true, Some(sites)) = (attention_on, &self.attention) {
            x = sites[1].forward(cx, &x)?;
        }
        let x = self.transition2.forward(cx, &x)?;
        ops::avg_pool2d(cx.graph, &x, 2)
    }
}

/// conv4 blocks plus the conv5 pointwise layer; each branch owns one.
#[derive(Clone, Debug)]
pub struct StagePair {
    pub conv4: Vec<OsBlock>,
    pub conv5: ConvBn,
}

impl StagePair {
    pub fn new<T: Real>(b: &mut Builder<'_, T>, cfg: &BackboneConfig) -> Result<Self> {
        let [_, _, c2, c3] = cfg.widths();
        let conv4 = b.scoped("conv4", |b| stage(b, cfg, c2, c3, cfg.blocks_per_stage[2]))?;
        let conv5 = b.scoped("conv5", |b| ConvBn::new(b, c3, cfg.embedding_dim(), 1, ConvGeom::UNIT, true));
        Ok(StagePair { conv4, conv5 })
    }

    pub fn forward<T: Real>(&self, cx: &mut Ctx<'_, T>, x: &Var<T>) -> Result<Var<T>> {
        let y = run(&self.conv4, cx, x)?;
        self.conv5.forward(cx, &y)
    }
}
