//! Pre-fusion feature blocks: convolution block, channel and spatial
//! attention gates, the quadrant feature extractor, the two-branch inverted
//! residual block and the video stage composed from them.

use alloc::format;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::error::{Error, Result, StageExt};
use crate::graph::Graph;
use crate::layers::{BatchNorm, Conv};
use crate::ops::{Activation, Conv2dParams, PoolKind};
use crate::param::ParamStore;
use crate::rng::RngState;
use crate::scalar::Scalar;

/// Frame extent the quadrant extractor is hard-wired to.
pub const FRAME: usize = 56;
/// Quadrant extent, `FRAME / 2`.
pub const PATCH: usize = 28;

/// `Audio` blocks are 1-D over `[B, C, L]`; `Video` blocks are 2-D over
/// `[B, C, H, W]`. The fused streams are 1-D sequences and use the 1-D form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Modality {
    Audio,
    Video,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ConvBlockSpec {
    pub filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub modality: Modality,
    /// Max-pool window and stride; 1 disables pooling.
    pub pool: usize,
    /// Batch norm + ReLU after the convolution. Always on for audio; video
    /// blocks skip it unless asked.
    pub normalize: bool,
}

impl ConvBlockSpec {
    /// conv1d, batch norm, ReLU, max pool 2.
    pub fn audio(filters: usize, kernel: usize, stride: usize) -> Self {
        Self { filters, kernel, stride, modality: Modality::Audio, pool: 2, normalize: true }
    }

    /// conv2d, max pool 2.
    pub fn video(filters: usize, kernel: usize, stride: usize) -> Self {
        Self { filters, kernel, stride, modality: Modality::Video, pool: 2, normalize: false }
    }

    pub fn with_pool(mut self, pool: usize) -> Self {
        self.pool = pool;
        self
    }

    pub fn with_norm(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    fn validate(&self, name: &str) -> Result<()> {
        if self.filters == 0 || self.kernel == 0 || self.stride == 0 || self.pool == 0 {
            return Err(Error::config(format!("{name}: filters, kernel, stride and pool must be positive")));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("{name}: kernel {} must be odd for same padding", self.kernel)));
        }
        if self.modality == Modality::Audio && !self.normalize {
            return Err(Error::config(format!("{name}: audio blocks always normalize")));
        }
        Ok(())
    }

    /// Output extent of one spatial/temporal axis of length `n`.
    pub fn out_extent(&self, n: usize) -> Option<usize> {
        let pad = (self.kernel - 1) / 2;
        let conv = crate::ops::conv::conv_out_extent(n, self.kernel, self.stride, pad, 1)?;
        (conv >= self.pool).then(|| (conv - self.pool) / self.pool + 1)
    }
}

/// Convolution, optional batch norm + ReLU, optional max pool.
#[derive(Clone, Debug)]
pub struct ConvBlock {
    pub spec: ConvBlockSpec,
    pub conv: Conv,
    pub norm: Option<BatchNorm>,
}

impl ConvBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        name: &str,
        c_in: usize,
        spec: ConvBlockSpec,
        bias: bool,
    ) -> Result<Self> {
        spec.validate(name)?;
        let conv = match spec.modality {
            Modality::Audio => Conv::new_1d(store, rng, &format!("{name}.conv"), c_in, spec.filters, spec.kernel, spec.stride, bias)?,
            Modality::Video => {
                let p = Conv2dParams::same(spec.kernel, spec.stride, 1);
                Conv::new_2d(store, rng, &format!("{name}.conv"), c_in, spec.filters, spec.kernel, p, bias)?
            }
        };
        let norm = spec.normalize.then(|| BatchNorm::new(store, &format!("{name}.bn"), spec.filters, 1)).transpose()?;
        Ok(Self { spec, conv, norm })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let want = match self.spec.modality {
            Modality::Audio => 3,
            Modality::Video => 4,
        };
        if g.shape(x).len() != want {
            return Err(Error::shape("conv_block", format!("{:?} block expects rank {want}", self.spec.modality), g.shape(x), &[]));
        }
        let mut y = self.conv.forward(g, x)?;
        if let Some(bn) = &self.norm {
            y = bn.forward(g, y)?;
            y = g.relu(y);
        }
        let p = self.spec.pool;
        if p > 1 {
            y = match self.spec.modality {
                Modality::Audio => g.max_pool1d(y, p, p)?,
                Modality::Video => g.pool2d(y, PoolKind::Max, [p, p], [p, p])?,
            };
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ChannelGateSpec {
    /// `r`
    pub reduction: usize,
    /// `g`, which must equal the input channel count.
    pub gate_channels: usize,
    /// `n`
    pub layers: usize,
}

impl ChannelGateSpec {
    /// `[g, (g / r) * n, g]`: output channels of the successive 1x1 stages.
    pub fn channels(&self) -> Result<[usize; 3]> {
        let (g, r, n) = (self.gate_channels, self.reduction, self.layers);
        if g == 0 || r == 0 || n == 0 || g % r != 0 || g / r == 0 {
            return Err(Error::config(format!("channel gate needs g divisible by r and n >= 1 (g={g}, r={r}, n={n})")));
        }
        Ok([g, g / r * n, g])
    }
}

/// Squeeze-style channel gate: global average pool, a 1x1 conv/bn/ReLU stack
/// over `[g, (g/r)n, g]`, sigmoid, and a per-channel rescale of the input.
#[derive(Clone, Debug)]
pub struct ChannelAttention {
    pub spec: ChannelGateSpec,
    pub stages: Vec<(Conv, BatchNorm)>,
}

impl ChannelAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut RngState, name: &str, c_in: usize, spec: ChannelGateSpec) -> Result<Self> {
        let widths = spec.channels()?;
        if c_in != spec.gate_channels {
            return Err(Error::config(format!("{name}: input has {c_in} channels but gate channel g = {}", spec.gate_channels)));
        }
        let mut stages = Vec::new();
        let mut c = c_in;
        for (i, &w) in widths.iter().enumerate() {
            let conv = Conv::new_2d(store, rng, &format!("{name}.gate{i}.conv"), c, w, 1, Conv2dParams::default(), false)?;
            let bn = BatchNorm::new(store, &format!("{name}.gate{i}.bn"), w, 1)?;
            stages.push((conv, bn));
            c = w;
        }
        Ok(Self { spec, stages })
    }

    /// Returns the gated input and the `[B, C, 1, 1]` gate.
    pub fn forward_with_gate<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.spec.gate_channels {
            return Err(Error::shape("channel_attention", "expected [B, g, H, W]", s, &[self.spec.gate_channels]));
        }
        let mut z = g.global_avg_pool(x)?;
        for (conv, bn) in &self.stages {
            z = conv.forward(g, z)?;
            z = bn.forward(g, z)?;
            z = g.relu(z);
        }
        let gate = g.activation(z, Activation::Sigmoid);
        Ok((g.mul(x, gate)?, gate))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_gate(g, x)?.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SpatialGateSpec {
    /// `d`, the number of dilated stages; stage `i` uses dilation `2^(i-1)`.
    pub dilations: usize,
    pub filters: usize,
    pub kernel: usize,
}

/// Spatial gate: `d` chained dilated conv/bn/ReLU stages, a 1-channel conv,
/// sigmoid, and a per-position rescale of the input.
#[derive(Clone, Debug)]
pub struct SpatialAttention {
    pub spec: SpatialGateSpec,
    pub stages: Vec<(Conv, BatchNorm)>,
    pub head: Conv,
}

impl SpatialAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut RngState, name: &str, c_in: usize, spec: SpatialGateSpec) -> Result<Self> {
        if spec.dilations == 0 || spec.filters == 0 || spec.kernel.is_multiple_of(2) {
            return Err(Error::config(format!("{name}: need d >= 1, filters >= 1 and an odd kernel")));
        }
        let mut stages = Vec::new();
        let mut c = c_in;
        for i in 0..spec.dilations {
            let p = Conv2dParams::same(spec.kernel, 1, 1 << i);
            let conv = Conv::new_2d(store, rng, &format!("{name}.stage{i}.conv"), c, spec.filters, spec.kernel, p, false)?;
            let bn = BatchNorm::new(store, &format!("{name}.stage{i}.bn"), spec.filters, 1)?;
            stages.push((conv, bn));
            c = spec.filters;
        }
        let head = Conv::new_2d(store, rng, &format!("{name}.head"), c, 1, spec.kernel, Conv2dParams::same(spec.kernel, 1, 1), true)?;
        Ok(Self { spec, stages, head })
    }

    /// Returns the gated input and the `[B, 1, H, W]` map.
    pub fn forward_with_map<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Var)> {
        let mut z = x;
        for (conv, bn) in &self.stages {
            z = conv.forward(g, z)?;
            z = bn.forward(g, z)?;
            z = g.relu(z);
        }
        z = self.head.forward(g, z)?;
        let map = g.activation(z, Activation::Sigmoid);
        Ok((g.mul(x, map)?, map))
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_map(g, x)?.0)
    }
}

/// Four independent conv blocks over the fixed 28x28 quadrants of a 56x56
/// map, concatenated on channels as top-left, top-right, bottom-left,
/// bottom-right.
#[derive(Clone, Debug)]
pub struct LocalFeatureExtractor {
    pub patches: [ConvBlock; 4],
}

impl LocalFeatureExtractor {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        name: &str,
        c_in: usize,
        spec: ConvBlockSpec,
        bias: bool,
    ) -> Result<Self> {
        if spec.modality != Modality::Video {
            return Err(Error::config(format!("{name}: quadrant blocks are 2-D")));
        }
        let mut make = |tag: &str| ConvBlock::new(store, rng, &format!("{name}.{tag}"), c_in, spec, bias);
        Ok(Self { patches: [make("patch11")?, make("patch12")?, make("patch21")?, make("patch22")?] })
    }

    pub fn out_channels(&self) -> usize {
        4 * self.patches[0].spec.filters
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[2] != FRAME || s[3] != FRAME {
            return Err(Error::shape("local_feature_extractor", "quadrant indices 0:28 and 28:56 need a 56x56 map", s, &[FRAME, FRAME]));
        }
        let top = g.slice(x, 2, 0, PATCH)?;
        let bottom = g.slice(x, 2, PATCH, FRAME)?;
        let quads =
            [g.slice(top, 3, 0, PATCH)?, g.slice(top, 3, PATCH, FRAME)?, g.slice(bottom, 3, 0, PATCH)?, g.slice(bottom, 3, PATCH, FRAME)?];
        let mut outs = [quads[0]; 4];
        for (o, (block, &q)) in outs.iter_mut().zip(self.patches.iter().zip(&quads)) {
            *o = block.forward(g, q)?;
        }
        g.concat(&outs, 1)
    }
}

/// Two branches joined by channel concatenation:
/// `depthwise -> bn -> 1x1 -> bn -> ReLU` and `conv block -> depthwise -> conv block`.
#[derive(Clone, Debug)]
pub struct InvertedResidualBlock {
    pub depthwise1: Conv,
    pub norm1: BatchNorm,
    pub pointwise: Conv,
    pub norm2: BatchNorm,
    pub block1: ConvBlock,
    pub depthwise2: Conv,
    pub block2: ConvBlock,
}

impl InvertedResidualBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        name: &str,
        c_in: usize,
        spec: ConvBlockSpec,
        bias: bool,
    ) -> Result<Self> {
        if spec.modality != Modality::Video {
            return Err(Error::config(format!("{name}: inverted residual blocks are 2-D")));
        }
        spec.validate(name)?;
        let (f, k, s) = (spec.filters, spec.kernel, spec.stride);
        let dw = |stride| Conv2dParams { depthwise: true, ..Conv2dParams::same(k, stride, 1) };
        let depthwise1 = Conv::new_2d(store, rng, &format!("{name}.x1.depthwise"), c_in, c_in, k, dw(s), false)?;
        let norm1 = BatchNorm::new(store, &format!("{name}.x1.bn1"), c_in, 1)?;
        let pointwise = Conv::new_2d(store, rng, &format!("{name}.x1.pointwise"), c_in, f, 1, Conv2dParams::default(), false)?;
        let norm2 = BatchNorm::new(store, &format!("{name}.x1.bn2"), f, 1)?;
        let block1 = ConvBlock::new(store, rng, &format!("{name}.x2.block1"), c_in, spec, bias)?;
        let depthwise2 = Conv::new_2d(store, rng, &format!("{name}.x2.depthwise"), f, f, k, dw(1), false)?;
        let block2 = ConvBlock::new(store, rng, &format!("{name}.x2.block2"), f, ConvBlockSpec { stride: 1, ..spec }, bias)?;
        Ok(Self { depthwise1, norm1, pointwise, norm2, block1, depthwise2, block2 })
    }

    pub fn out_channels(&self) -> usize {
        2 * self.block2.spec.filters
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut x1 = self.depthwise1.forward(g, x)?;
        x1 = self.norm1.forward(g, x1)?;
        x1 = self.pointwise.forward(g, x1)?;
        x1 = self.norm2.forward(g, x1)?;
        x1 = g.relu(x1);
        let mut x2 = self.block1.forward(g, x)?;
        x2 = self.depthwise2.forward(g, x2)?;
        x2 = self.block2.forward(g, x2)?;
        if g.shape(x1)[2..] != g.shape(x2)[2..] {
            return Err(Error::shape("inverted_residual_block", "branch extents diverge", g.shape(x1), g.shape(x2)));
        }
        g.concat(&[x1, x2], 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct VideoStageSpec {
    pub channel: ChannelGateSpec,
    pub spatial: SpatialGateSpec,
    pub patch: ConvBlockSpec,
    pub residual: [ConvBlockSpec; 2],
    pub tail: [ConvBlockSpec; 2],
}

/// Everything between the first video conv block and the frame pooling:
/// `(CA(v) * SA(v) + LFE(v)) -> IRB -> IRB -> conv block -> conv block`.
///
/// The gated map keeps the input extent while the quadrant blocks pool it,
/// so the gated map is max-pooled by the integer ratio before the sum.
#[derive(Clone, Debug)]
pub struct VideoFeatureStage {
    pub channel: ChannelAttention,
    pub spatial: SpatialAttention,
    pub local: LocalFeatureExtractor,
    pub residual: [InvertedResidualBlock; 2],
    pub tail: [ConvBlock; 2],
}

impl VideoFeatureStage {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        name: &str,
        c_in: usize,
        spec: &VideoStageSpec,
        bias: bool,
    ) -> Result<Self> {
        let channel = ChannelAttention::new(store, rng, &format!("{name}.channel_attention"), c_in, spec.channel)?;
        let spatial = SpatialAttention::new(store, rng, &format!("{name}.spatial_attention"), c_in, spec.spatial)?;
        let local = LocalFeatureExtractor::new(store, rng, &format!("{name}.local_features"), c_in, spec.patch, bias)?;
        if local.out_channels() != c_in {
            return Err(Error::config(format!(
                "{name}: attention output has {c_in} channels but the quadrant extractor gives {} (4 x {})",
                local.out_channels(),
                spec.patch.filters
            )));
        }
        let r0 = InvertedResidualBlock::new(store, rng, &format!("{name}.residual0"), c_in, spec.residual[0], bias)?;
        let r1 = InvertedResidualBlock::new(store, rng, &format!("{name}.residual1"), r0.out_channels(), spec.residual[1], bias)?;
        let t0 = ConvBlock::new(store, rng, &format!("{name}.tail0"), r1.out_channels(), spec.tail[0], bias)?;
        let t1 = ConvBlock::new(store, rng, &format!("{name}.tail1"), spec.tail[0].filters, spec.tail[1], bias)?;
        Ok(Self { channel, spatial, local, residual: [r0, r1], tail: [t0, t1] })
    }

    pub fn out_channels(&self) -> usize {
        self.tail[1].spec.filters
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, v: Var) -> Result<Var> {
        let ca = self.channel.forward(g, v).stage("channel_attention")?;
        let sa = self.spatial.forward(g, v).stage("spatial_attention")?;
        let mut att = g.mul(ca, sa).stage("attention_product")?;
        let lfr = self.local.forward(g, v).stage("local_feature_extractor")?;
        let (h, hl) = (g.shape(att)[2], g.shape(lfr)[2]);
        if h != hl {
            if h % hl != 0 || !g.shape(att)[3].is_multiple_of(g.shape(lfr)[3]) {
                return Err(Error::shape(
                    "video_feature_stage",
                    "gated map does not tile the quadrant features",
                    g.shape(att),
                    g.shape(lfr),
                ));
            }
            let r = [h / hl, g.shape(att)[3] / g.shape(lfr)[3]];
            att = g.pool2d(att, PoolKind::Max, r, r)?;
        }
        let mut x = g.add(att, lfr).stage("enhance_sum")?;
        for (i, irb) in self.residual.iter().enumerate() {
            x = irb.forward(g, x).stage(&format!("inverted_residual{i}"))?;
        }
        for (i, block) in self.tail.iter().enumerate() {
            x = block.forward(g, x).stage(&format!("video_tail{i}"))?;
        }
        Ok(x)
    }
}
