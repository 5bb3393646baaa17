//! The full classifier: audio and video branches, intermediate transformer
//! fusion, post-fusion convolution, the bidirectional attention exchange,
//! late cross attention and the pooled softmax head. Also the ablation
//! variants, the training state and the AdamW step.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;
use core::hash::Hasher;
use core::str::FromStr;

use fnv::FnvHasher;

use crate::autograd::Var;
use crate::blocks::{ChannelGateSpec, SpatialGateSpec};
use crate::blocks::{ConvBlock, ConvBlockSpec, Modality, VideoFeatureStage, VideoStageSpec, FRAME};
use crate::error::{Error, Result, StageExt};
use crate::fusion::{AttentionSpec, CrossAttention, SelfAttention, TransformerBlock};
use crate::graph::{Graph, Mode};
use crate::layers::Linear;
use crate::param::ParamStore;
use crate::rng::RngState;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Extents, widths and head counts of the full model.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct ModelConfig {
    pub classes: usize,
    /// `e`, the channel width both streams reach before fusion.
    pub embed: usize,
    /// Heads of the intermediate transformer blocks and the exchange stage.
    pub fusion_heads: usize,
    /// Heads of the late cross attention.
    pub late_heads: usize,
    pub audio_len: usize,
    pub frames: usize,
    pub frame_size: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Bias on the convolutions of conv blocks and residual branches.
    pub conv_bias: bool,
    pub audio: [ConvBlockSpec; 2],
    pub video_stem: ConvBlockSpec,
    pub video: VideoStageSpec,
    pub post_audio: [ConvBlockSpec; 2],
    pub post_video: [ConvBlockSpec; 2],
}

impl ModelConfig {
    /// `e = 8`, three classes, 16 audio samples, two frames.
    pub fn tiny() -> Self {
        let e = 8;
        Self {
            classes: 3,
            embed: e,
            fusion_heads: 2,
            late_heads: 2,
            audio_len: 16,
            frames: 2,
            frame_size: FRAME,
            mlp_hidden: 16,
            dropout: 0.1,
            conv_bias: true,
            audio: [ConvBlockSpec::audio(e, 3, 2), ConvBlockSpec::audio(e, 3, 1)],
            video_stem: ConvBlockSpec::video(4, 3, 1).with_pool(1),
            video: VideoStageSpec {
                channel: ChannelGateSpec { reduction: 2, gate_channels: 4, layers: 1 },
                spatial: SpatialGateSpec { dilations: 1, filters: 2, kernel: 3 },
                patch: ConvBlockSpec::video(1, 3, 1),
                residual: [ConvBlockSpec::video(2, 3, 1).with_pool(1); 2],
                tail: [ConvBlockSpec::video(e, 3, 1).with_norm(true); 2],
            },
            post_audio: [ConvBlockSpec::audio(e, 3, 1), ConvBlockSpec::audio(e, 3, 1).with_pool(1)],
            post_video: [ConvBlockSpec::audio(e, 3, 1).with_pool(1); 2],
        }
    }

    /// The configuration the synthetic experiments run at: six classes,
    /// `e = 16`, 32 audio samples and two frames.
    pub fn desk() -> Self {
        let e = 16;
        Self {
            classes: 6,
            embed: e,
            fusion_heads: 4,
            late_heads: 4,
            audio_len: 32,
            frames: 2,
            frame_size: FRAME,
            mlp_hidden: 32,
            dropout: 0.1,
            conv_bias: true,
            audio: [ConvBlockSpec::audio(e, 3, 2), ConvBlockSpec::audio(e, 3, 2)],
            video_stem: ConvBlockSpec::video(4, 3, 1).with_pool(1),
            video: VideoStageSpec {
                channel: ChannelGateSpec { reduction: 2, gate_channels: 4, layers: 1 },
                spatial: SpatialGateSpec { dilations: 2, filters: 2, kernel: 3 },
                patch: ConvBlockSpec::video(1, 3, 1),
                residual: [ConvBlockSpec::video(4, 3, 1).with_pool(1); 2],
                tail: [ConvBlockSpec::video(e, 3, 1).with_norm(true); 2],
            },
            post_audio: [ConvBlockSpec::audio(e, 3, 1), ConvBlockSpec::audio(e, 3, 1).with_pool(1)],
            post_video: [ConvBlockSpec::audio(e, 3, 1).with_pool(1); 2],
        }
    }

    /// Sequence length of the audio stream entering fusion.
    pub fn audio_seq_len(&self) -> Option<usize> {
        self.audio.iter().try_fold(self.audio_len, |n, b| b.out_extent(n))
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.embed;
        if self.classes < 2 {
            return Err(Error::config(format!("classes must be >= 2, got {}", self.classes)));
        }
        AttentionSpec::new(e, self.fusion_heads, self.dropout)?;
        AttentionSpec::new(e, self.late_heads, self.dropout)?;
        if self.frame_size != FRAME {
            return Err(Error::config(format!("frame_size must be {FRAME}, got {}", self.frame_size)));
        }
        if self.frames == 0 || self.mlp_hidden == 0 {
            return Err(Error::config("frames and mlp_hidden must be positive"));
        }
        let one_d = self.audio.iter().chain(&self.post_audio).chain(&self.post_video);
        if one_d.clone().any(|b| b.modality != Modality::Audio) {
            return Err(Error::config("audio and post-fusion blocks must be 1-D (modality = audio)"));
        }
        let two_d = [self.video_stem, self.video.patch].into_iter().chain(self.video.residual).chain(self.video.tail);
        if two_d.clone().any(|b| b.modality != Modality::Video) {
            return Err(Error::config("video blocks must be 2-D (modality = video)"));
        }
        for (what, width) in [
            ("audio[1]", self.audio[1].filters),
            ("video.tail[1]", self.video.tail[1].filters),
            ("post_audio[1]", self.post_audio[1].filters),
            ("post_video[1]", self.post_video[1].filters),
        ] {
            if width != e {
                return Err(Error::config(format!("{what} must output embed = {e} channels, got {width}")));
            }
        }
        if self.video_stem.out_extent(FRAME) != Some(FRAME) {
            return Err(Error::config("the first video block must keep the 56x56 extent (stride 1, pool 1)"));
        }
        match self.audio_seq_len() {
            Some(l) if l == self.frames => {}
            Some(l) => {
                return Err(Error::config(format!(
                    "audio stream reaches length {l} but the video stream has {} frames; both must align for the residual sums",
                    self.frames
                )))
            }
            None => return Err(Error::config(format!("audio_len {} is too short for the audio blocks", self.audio_len))),
        }
        let post = |blocks: &[ConvBlockSpec; 2]| blocks.iter().try_fold(self.frames, |n, b| b.out_extent(n));
        if post(&self.post_audio).is_none() || post(&self.post_video).is_none() {
            return Err(Error::config("post-fusion blocks shrink the sequence below length 1"));
        }
        Ok(())
    }
}

/// One of the five configurations compared in the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VariantId {
    It1,
    It4,
    Ct1,
    Ct4,
    Full,
}

impl VariantId {
    /// Table order.
    pub const ALL: [VariantId; 5] = [VariantId::It1, VariantId::It4, VariantId::Ct1, VariantId::Ct4, VariantId::Full];

    pub fn as_str(self) -> &'static str {
        match self {
            VariantId::It1 => "IT-1",
            VariantId::It4 => "IT-4",
            VariantId::Ct1 => "CT-1",
            VariantId::Ct4 => "CT-4",
            VariantId::Full => "FULL",
        }
    }

    pub fn architecture(self, cfg: &ModelConfig) -> Architecture {
        let (fusion, late) = match self {
            VariantId::It1 => (Some(1), None),
            VariantId::It4 => (Some(4), None),
            VariantId::Ct1 => (None, Some(1)),
            VariantId::Ct4 => (None, Some(4)),
            VariantId::Full => (Some(cfg.fusion_heads), Some(cfg.late_heads)),
        };
        Architecture { streams: Streams::Both, fusion_heads: fusion, late_heads: late }
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        VariantId::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown variant `{s}`; expected IT-1, IT-4, CT-1, CT-4 or FULL")))
    }
}

/// Which input streams reach the classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Streams {
    Both,
    /// Audio branch and its post-fusion blocks only.
    AudioOnly,
    /// Video branch and its post-fusion blocks only.
    VideoOnly,
}

/// The stages a model is built with. `None` removes a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub streams: Streams,
    pub fusion_heads: Option<usize>,
    pub late_heads: Option<usize>,
}

impl Architecture {
    pub fn full(cfg: &ModelConfig) -> Self {
        VariantId::Full.architecture(cfg)
    }

    pub fn single(streams: Streams) -> Self {
        Self { streams, fusion_heads: None, late_heads: None }
    }

    /// Stable textual form, stored in checkpoints.
    pub fn code(&self) -> String {
        let opt = |h: Option<usize>| h.map_or_else(|| String::from("-"), |h| format!("{h}"));
        let s = match self.streams {
            Streams::Both => "both",
            Streams::AudioOnly => "audio",
            Streams::VideoOnly => "video",
        };
        format!("{s}/{}/{}", opt(self.fusion_heads), opt(self.late_heads))
    }

    pub fn from_code(code: &str) -> Result<Self> {
        let bad = || Error::config(format!("malformed architecture code `{code}`"));
        let mut parts = code.split('/');
        let streams = match parts.next() {
            Some("both") => Streams::Both,
            Some("audio") => Streams::AudioOnly,
            Some("video") => Streams::VideoOnly,
            _ => return Err(bad()),
        };
        let mut heads = || -> Result<Option<usize>> {
            match parts.next() {
                Some("-") => Ok(None),
                Some(n) => n.parse().map(Some).map_err(|_| bad()),
                None => Err(bad()),
            }
        };
        let (fusion_heads, late_heads) = (heads()?, heads()?);
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(Self { streams, fusion_heads, late_heads })
    }
}

/// 64-bit FNV digest of everything that determines the parameter table and
/// the input extents.
pub fn config_digest(cfg: &ModelConfig, arch: &Architecture) -> u64 {
    let mut h = FnvHasher::default();
    let mut put = |v: u64| h.write(&v.to_le_bytes());
    for v in [cfg.classes, cfg.embed, cfg.fusion_heads, cfg.late_heads, cfg.audio_len, cfg.frames, cfg.frame_size, cfg.mlp_hidden] {
        put(v as u64);
    }
    put(cfg.dropout.to_bits());
    put(cfg.conv_bias as u64);
    let mut block = |b: &ConvBlockSpec| {
        for v in [b.filters, b.kernel, b.stride, b.modality as usize, b.pool, b.normalize as usize] {
            put(v as u64);
        }
    };
    for b in cfg.audio.iter().chain([&cfg.video_stem, &cfg.video.patch]).chain(&cfg.video.residual).chain(&cfg.video.tail) {
        block(b);
    }
    for b in cfg.post_audio.iter().chain(&cfg.post_video) {
        block(b);
    }
    let c = cfg.video.channel;
    let s = cfg.video.spatial;
    for v in [c.reduction, c.gate_channels, c.layers, s.dilations, s.filters, s.kernel] {
        put(v as u64);
    }
    for b in arch.code().bytes() {
        put(b as u64);
    }
    h.finish()
}

#[derive(Clone, Debug)]
struct VideoBranch {
    stem: ConvBlock,
    stage: VideoFeatureStage,
}

/// Layer handles of one built model; the values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub arch: Architecture,
    audio: Option<[ConvBlock; 2]>,
    video: Option<VideoBranch>,
    fusion: Option<[TransformerBlock; 2]>,
    post_audio: Option<[ConvBlock; 2]>,
    post_video: Option<[ConvBlock; 2]>,
    exchange: Option<[SelfAttention; 2]>,
    late: Option<[CrossAttention; 2]>,
    classifier: Linear,
}

/// Forward output plus the stage boundaries, used to locate divergence.
pub struct Forward {
    pub probs: Var,
    pub stages: Vec<(&'static str, Var)>,
}

fn conv_pair<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut RngState,
    name: &str,
    c_in: usize,
    specs: &[ConvBlockSpec; 2],
    bias: bool,
) -> Result<[ConvBlock; 2]> {
    let b0 = ConvBlock::new(store, rng, &format!("{name}.conv0"), c_in, specs[0], bias)?;
    let b1 = ConvBlock::new(store, rng, &format!("{name}.conv1"), specs[0].filters, specs[1], bias)?;
    Ok([b0, b1])
}

fn run_pair<T: Scalar>(g: &mut Graph<'_, T>, blocks: &[ConvBlock; 2], x: Var) -> Result<Var> {
    let y = blocks[0].forward(g, x)?;
    blocks[1].forward(g, y)
}

impl Model {
    /// Registers every layer in `store`, drawing initial weights from `rng`.
    pub fn build<T: Scalar>(config: ModelConfig, arch: Architecture, store: &mut ParamStore<T>, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let (e, bias) = (config.embed, config.conv_bias);
        let has_audio = arch.streams != Streams::VideoOnly;
        let has_video = arch.streams != Streams::AudioOnly;
        let both = arch.streams == Streams::Both;
        if !both && (arch.fusion_heads.is_some() || arch.late_heads.is_some()) {
            return Err(Error::config("single-stream models have no fusion or cross-attention stage"));
        }
        let audio = has_audio.then(|| conv_pair(store, rng, "audio", 1, &config.audio, bias)).transpose()?;
        let video = if has_video {
            let stem = ConvBlock::new(store, rng, "video.stem", 1, config.video_stem, bias)?;
            let stage = VideoFeatureStage::new(store, rng, "video", config.video_stem.filters, &config.video, bias)?;
            Some(VideoBranch { stem, stage })
        } else {
            None
        };
        let fusion = match arch.fusion_heads {
            Some(n) => {
                let spec = AttentionSpec::new(e, n, config.dropout)?;
                let av = TransformerBlock::new(store, rng, "transformer.av", spec, config.mlp_hidden)?;
                let va = TransformerBlock::new(store, rng, "transformer.va", spec, config.mlp_hidden)?;
                Some([av, va])
            }
            None => None,
        };
        let post_audio = has_audio.then(|| conv_pair(store, rng, "post_audio", e, &config.post_audio, bias)).transpose()?;
        let post_video = has_video.then(|| conv_pair(store, rng, "post_video", e, &config.post_video, bias)).transpose()?;
        let exchange = if both {
            let spec = AttentionSpec::new(e, arch.fusion_heads.unwrap_or(config.fusion_heads), config.dropout)?;
            let av = SelfAttention::new(store, rng, "exchange.av", spec)?;
            let va = SelfAttention::new(store, rng, "exchange.va", spec)?;
            Some([av, va])
        } else {
            None
        };
        let late = match arch.late_heads {
            Some(n) => Some([
                CrossAttention::new(store, rng, "cross_attention.audio", e, n)?,
                CrossAttention::new(store, rng, "cross_attention.video", e, n)?,
            ]),
            None => None,
        };
        let classifier = Linear::new(store, rng, "classifier", e, config.classes, true)?;
        Ok(Self { config, arch, audio, video, fusion, post_audio, post_video, exchange, late, classifier })
    }

    pub fn digest(&self) -> u64 {
        config_digest(&self.config, &self.arch)
    }

    fn check_inputs<T: Scalar>(&self, g: &Graph<'_, T>, audio: Var, video: Var) -> Result<usize> {
        let c = &self.config;
        let (a, v) = (g.shape(audio), g.shape(video));
        let b = a.first().copied().unwrap_or(0);
        if a != [b, 1, c.audio_len] || b == 0 {
            return Err(Error::shape("forward", format!("audio must be [B, 1, {}]", c.audio_len), a, v).at_stage("input"));
        }
        if v != [b, 1, c.frames, c.frame_size, c.frame_size] {
            return Err(Error::shape("forward", format!("video must be [{b}, 1, {}, {s}, {s}]", c.frames, s = c.frame_size), v, a)
                .at_stage("input"));
        }
        Ok(b)
    }

    /// `[B, 1, L]` audio and `[B, 1, T, 56, 56]` video to `[B, C]`
    /// class probabilities.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, audio: Var, video: Var) -> Result<Var> {
        Ok(self.forward_traced(g, audio, video)?.probs)
    }

    pub fn forward_traced<T: Scalar>(&self, g: &mut Graph<'_, T>, audio: Var, video: Var) -> Result<Forward> {
        let b = self.check_inputs(g, audio, video)?;
        let (e, t) = (self.config.embed, self.config.frames);
        let mut stages = Vec::new();

        // [B, e, L] per stream
        let a_conv = match &self.audio {
            Some(blocks) => {
                let y = run_pair(g, blocks, audio).stage("audio_conv")?;
                stages.push(("audio_conv", y));
                Some(y)
            }
            None => None,
        };
        let v_conv = match &self.video {
            Some(branch) => {
                let frames = g.reshape(video, &[b * t, 1, FRAME, FRAME])?;
                let x = branch.stem.forward(g, frames).stage("video_conv")?;
                let x = branch.stage.forward(g, x).stage("video_features")?;
                let pooled = g.global_avg_pool(x)?;
                let seq = g.reshape(pooled, &[b, t, e]).stage("frame_pool")?;
                let y = g.permute(seq, &[0, 2, 1])?;
                stages.push(("video_features", y));
                Some(y)
            }
            None => None,
        };

        let (mut x_a, mut x_v) = (a_conv, v_conv);
        if let (Some(blocks), Some(a), Some(v)) = (&self.fusion, a_conv, v_conv) {
            let a_proj = g.permute(a, &[0, 2, 1])?;
            let v_proj = g.permute(v, &[0, 2, 1])?;
            let h_av = blocks[0].forward(g, v_proj, a_proj).stage("transformer_av")?;
            let h_va = blocks[1].forward(g, a_proj, v_proj).stage("transformer_va")?;
            let h_av = g.permute(h_av, &[0, 2, 1])?;
            let h_va = g.permute(h_va, &[0, 2, 1])?;
            x_a = Some(g.add(h_av, a).stage("fusion_residual_audio")?);
            x_v = Some(g.add(h_va, v).stage("fusion_residual_video")?);
            stages.push(("intermediate_fusion", x_a.unwrap()));
            stages.push(("intermediate_fusion", x_v.unwrap()));
        }

        // [B, L, e] from here on
        let mut seq_a = None;
        let mut seq_v = None;
        if let (Some(blocks), Some(x)) = (&self.post_audio, x_a) {
            let y = run_pair(g, blocks, x).stage("post_audio_conv")?;
            seq_a = Some(g.permute(y, &[0, 2, 1])?);
        }
        if let (Some(blocks), Some(x)) = (&self.post_video, x_v) {
            let y = run_pair(g, blocks, x).stage("post_video_conv")?;
            seq_v = Some(g.permute(y, &[0, 2, 1])?);
        }

        let pooled = match (seq_a, seq_v) {
            (Some(xa), Some(xv)) => {
                let ex = self.exchange.as_ref().expect("two-stream models carry the exchange stage");
                let (h_av, _) = ex[0].forward(g, xa, xv).stage("exchange_av")?;
                let (h_va, _) = ex[1].forward(g, xv, xa).stage("exchange_va")?;
                let xa2 = g.add(xa, h_av).stage("exchange_residual_audio")?;
                let xv2 = g.add(xv, h_va).stage("exchange_residual_video")?;
                stages.push(("exchange", xa2));
                stages.push(("exchange", xv2));
                let (ya, yv) = match &self.late {
                    Some(ca) => {
                        let ya = ca[0].forward(g, xa2, xv2).stage("cross_attention_audio")?;
                        let yv = ca[1].forward(g, xv2, xa2).stage("cross_attention_video")?;
                        stages.push(("cross_attention", ya));
                        stages.push(("cross_attention", yv));
                        (ya, yv)
                    }
                    None => (xa2, xv2),
                };
                let pa = g.max_over_axis(ya, 1)?;
                let pv = g.max_over_axis(yv, 1)?;
                g.add(pa, pv).stage("pooled_sum")?
            }
            (Some(x), None) | (None, Some(x)) => g.max_over_axis(x, 1)?,
            (None, None) => unreachable!("a model has at least one stream"),
        };
        let logits = self.classifier.forward(g, pooled).stage("classifier")?;
        stages.push(("classifier", logits));
        let probs = g.softmax(logits, 1)?;
        Ok(Forward { probs, stages })
    }
}

/// One mini-batch: `audio: [B, 1, L]`, `video: [B, 1, T, 56, 56]`,
/// one-hot `labels: [B, C]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub audio: Tensor<T>,
    pub video: Tensor<T>,
    pub labels: Tensor<T>,
}

/// AdamW hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Hyper {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { lr: 0.01, weight_decay: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Applies one AdamW update from the accumulated gradients; `t` is the
/// 1-based step number. Decay is decoupled and only touches parameters
/// flagged for it.
pub fn adamw_update<T: Scalar>(store: &mut ParamStore<T>, hyper: &Hyper, t: u64) {
    let t = t.max(1) as i32;
    let c1 = 1.0 - libm::pow(hyper.beta1, t as f64);
    let c2 = 1.0 - libm::pow(hyper.beta2, t as f64);
    let (b1, b2) = (T::from_f64(hyper.beta1), T::from_f64(hyper.beta2));
    let (one, lr, eps) = (T::one(), T::from_f64(hyper.lr), T::from_f64(hyper.eps));
    let (c1, c2) = (T::from_f64(c1), T::from_f64(c2));
    let shrink = T::from_f64(1.0 - hyper.lr * hyper.weight_decay);
    for p in store.params_mut() {
        let decay = p.decay && hyper.weight_decay != 0.0;
        let grad = p.grad.data();
        let (m, v) = (p.moment1.data_mut(), p.moment2.data_mut());
        let theta = p.value.data_mut();
        for i in 0..theta.len() {
            let gi = grad[i];
            if decay {
                theta[i] *= shrink;
            }
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            theta[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}

/// Parameters, running statistics, random state and progress counters of
/// one training run.
#[derive(Clone, Debug)]
pub struct ModelState<T> {
    pub model: Model,
    pub store: ParamStore<T>,
    pub rng: RngState,
    pub epoch: u64,
    /// Optimizer steps taken so far.
    pub step: u64,
}

/// Builds one of the ablation variants from `cfg`, initialized from `seed`.
pub fn build_variant<T: Scalar>(id: VariantId, cfg: ModelConfig, seed: u64) -> Result<ModelState<T>> {
    ModelState::new(cfg, id.architecture(&cfg), seed)
}

impl<T: Scalar> ModelState<T> {
    pub fn new(config: ModelConfig, arch: Architecture, seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = RngState::new(seed);
        let model = Model::build(config, arch, &mut store, &mut rng)?;
        Ok(Self { model, store, rng, epoch: 0, step: 0 })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_elements()
    }

    /// Eval-mode probabilities; leaves the state untouched.
    pub fn predict(&self, audio: Tensor<T>, video: Tensor<T>) -> Result<Tensor<T>> {
        let mut rng = self.rng;
        let mut g = Graph::new(&self.store, &mut rng, Mode::Eval);
        let (a, v) = (g.input(audio), g.input(video));
        let p = self.model.forward(&mut g, a, v)?;
        Ok(g.value(p).clone())
    }

    /// Mean cross-entropy and probabilities in eval mode.
    pub fn evaluate(&self, batch: &Batch<T>) -> Result<(f64, Tensor<T>)> {
        let probs = self.predict(batch.audio.clone(), batch.video.clone())?;
        let loss = crate::ops::cross_entropy(&probs, &batch.labels)?;
        Ok((loss.to_f64(), probs))
    }

    /// Forward, loss, gradients, running-stat update and one AdamW step.
    /// Returns the batch loss.
    pub fn train_step(&mut self, batch: &Batch<T>, hyper: &Hyper) -> Result<f64> {
        let (loss, grads, updates) = {
            let mut g = Graph::new(&self.store, &mut self.rng, Mode::Train);
            let (a, v) = (g.input(batch.audio.clone()), g.input(batch.video.clone()));
            let fwd = self.model.forward_traced(&mut g, a, v)?;
            let l = g.cross_entropy(fwd.probs, &batch.labels)?;
            let loss = g.value(l).item().to_f64();
            if !loss.is_finite() {
                let stage = fwd.stages.iter().find(|(_, v)| !g.value(*v).is_finite()).map_or("loss", |s| s.0);
                return Err(Error::Divergence(format!(
                    "loss is {loss} at epoch {}, step {}; first non-finite stage: {stage}",
                    self.epoch,
                    self.step + 1
                )));
            }
            let grads = g.param_gradients(l)?;
            (loss, grads, g.into_updates())
        };
        if let Some((id, _)) = grads.iter().find(|(_, t)| !t.is_finite()) {
            return Err(Error::Divergence(format!(
                "non-finite gradient for {} at epoch {}, step {}",
                self.store.param(*id).name,
                self.epoch,
                self.step + 1
            )));
        }
        self.store.zero_grads();
        self.store.accumulate_grads(&grads);
        self.store.apply_buffer_updates(updates);
        self.step += 1;
        adamw_update(&mut self.store, hyper, self.step);
        Ok(loss)
    }
}
