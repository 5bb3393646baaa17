//! Central-difference verification of the analytic gradients.
//!
//! Everything runs in `f64` in [`Mode::Check`]: batch statistics, no
//! dropout, no state updates, so the objective is a deterministic function
//! of the parameters. Inputs that need checking are registered as
//! parameters of a scratch table.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Var;
use crate::blocks::{
    ChannelAttention, ChannelGateSpec, ConvBlock, ConvBlockSpec, InvertedResidualBlock, LocalFeatureExtractor, SpatialAttention,
    SpatialGateSpec, VideoFeatureStage, FRAME,
};
use crate::error::{Error, Result};
use crate::fusion::{cross_attention, AttentionSpec, CrossAttention, Mlp, SelfAttention, TransformerBlock};
use crate::graph::{Graph, Mode};
use crate::model::{Architecture, Model, ModelConfig};
use crate::param::{ParamId, ParamStore};
use crate::rng::RngState;
use crate::tensor::Tensor;

/// Denominator floor of the relative error. Below it the comparison is
/// effectively absolute, which keeps round-off in near-zero gradients from
/// reading as large relative errors.
pub const REL_FLOOR: f64 = 1e-4;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const STEP: f64 = 1e-5;
/// An entry that misses the tolerance is retried at `step / 10` and
/// `step / 100`; the best agreement counts. A ReLU or max-pool kink inside
/// the difference window disappears at a smaller step, a wrong gradient
/// does not.
pub const RETRIES: u32 = 2;

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Worst {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub block: String,
    /// Number of scalar entries compared.
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<Worst>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tolerance
    }

    /// `Err(GradCheck)` carrying `block/param` when the tolerance is missed.
    pub fn check(&self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let w = self.worst.clone().expect("a failing report has a worst entry");
        Err(Error::GradCheck {
            param: format!("{}/{}", self.block, w.param),
            index: w.index,
            analytic: w.analytic,
            numeric: w.numeric,
            rel_err: self.max_rel_err,
            tolerance: self.tolerance,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Entries compared per parameter tensor; `None` compares all of them.
    /// A subset is drawn with a fixed seed.
    pub per_param: Option<usize>,
    /// Scales the analytic gradient, a negative control for the checker.
    pub corrupt: bool,
}

impl CheckOptions {
    pub fn block() -> Self {
        Self { step: STEP, tolerance: BLOCK_TOLERANCE, per_param: None, corrupt: false }
    }
}

type Objective<'f> = dyn Fn(&mut Graph<'_, f64>) -> Result<Var> + 'f;

fn evaluate(store: &ParamStore<f64>, f: &Objective<'_>) -> Result<f64> {
    let mut rng = RngState::new(0);
    let mut g = Graph::new(store, &mut rng, Mode::Check);
    let y = f(&mut g)?;
    if g.value(y).numel() != 1 {
        return Err(Error::shape("grad_check", "objective must be a scalar", g.shape(y), &[]));
    }
    Ok(g.value(y).item())
}

/// Analytic gradient of every parameter, zero where the objective does not
/// reach it.
pub fn analytic_gradients(store: &ParamStore<f64>, f: &Objective<'_>) -> Result<Vec<Tensor<f64>>> {
    let mut rng = RngState::new(0);
    let mut g = Graph::new(store, &mut rng, Mode::Check);
    let y = f(&mut g)?;
    let mut out: Vec<Tensor<f64>> = store.params().iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    for (id, grad) in g.param_gradients(y)? {
        out[id.index()] = grad;
    }
    Ok(out)
}

/// Compares analytic and central-difference gradients for every parameter
/// of `store`.
pub fn grad_check(name: &str, store: &ParamStore<f64>, f: &Objective<'_>, opts: CheckOptions) -> Result<GradCheckReport> {
    let mut analytic = analytic_gradients(store, f)?;
    if opts.corrupt {
        for a in &mut analytic {
            for v in a.data_mut() {
                *v = *v * 1.5 + 1e-3;
            }
        }
    }
    let mut work = store.clone();
    let mut report = GradCheckReport { block: name.into(), checked: 0, max_rel_err: 0.0, worst: None, tolerance: opts.tolerance };
    let mut pick = RngState::new(0x6c);
    for (p, grad) in analytic.iter().enumerate() {
        let n = grad.numel();
        let mut entries: Vec<usize> = (0..n).collect();
        if let Some(k) = opts.per_param.filter(|&k| k < n) {
            pick.stream().shuffle(&mut entries);
            entries.truncate(k);
            entries.sort_unstable();
        }
        for i in entries {
            let id = ParamId(p);
            let a = grad.data()[i];
            let mut best: Option<(f64, f64)> = None;
            let mut step = opts.step;
            for _ in 0..=RETRIES {
                let numeric = central_difference(&mut work, id, i, step, f)?;
                let err = relative_error(a, numeric);
                if best.is_none_or(|(e, _)| err < e) {
                    best = Some((err, numeric));
                }
                if err < opts.tolerance {
                    break;
                }
                step /= 10.0;
            }
            let (err, numeric) = best.expect("at least one difference is taken");
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some(Worst { param: store.param(id).name.clone(), index: i, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

fn central_difference(work: &mut ParamStore<f64>, id: ParamId, i: usize, step: f64, f: &Objective<'_>) -> Result<f64> {
    let orig = work.param(id).value.data()[i];
    work.param_mut(id).value.data_mut()[i] = orig + step;
    let up = evaluate(work, f);
    work.param_mut(id).value.data_mut()[i] = orig - step;
    let down = evaluate(work, f);
    work.param_mut(id).value.data_mut()[i] = orig;
    Ok((up? - down?) / (2.0 * step))
}

/// `sum(x * w)` for fixed pseudo-random `w`: a scalar that depends on every
/// output entry with a different weight.
pub fn probe<'a>(g: &mut Graph<'a, f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let mut s = RngState::new(seed).stream();
    let w = Tensor::from_fn(&shape, |_| s.uniform_in(-1.0, 1.0));
    let n = w.numel();
    let y = g.mul_const(x, w)?;
    let flat = g.reshape(y, &[1, n])?;
    let ones = g.input(Tensor::ones(&[n, 1]));
    g.matmul(flat, ones)
}

fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut s = RngState::new(seed).stream();
    Tensor::from_fn(shape, |_| s.normal())
}

/// One named check: a parameter table and the scalar objective over it.
pub struct Case {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub objective: Box<Objective<'static>>,
    pub opts: CheckOptions,
}

impl Case {
    pub fn run(&self) -> Result<GradCheckReport> {
        grad_check(self.name, &self.store, &*self.objective, self.opts)
    }
}

fn input_param(store: &mut ParamStore<f64>, name: &str, shape: &[usize], seed: u64) -> Result<ParamId> {
    store.add_param(name, random(shape, seed), false)
}

/// Block checks at 1e-4 plus an end-to-end check at 1e-3 on `cfg` (the
/// tiny preset in the shipped configuration). `fault` names a block whose
/// analytic gradient is corrupted.
pub fn suite(cfg: &ModelConfig, seed: u64, fault: Option<&str>) -> Result<Vec<Case>> {
    let mut cases: Vec<Case> = Vec::new();
    let mut push = |name: &'static str, store, objective: Box<Objective<'static>>, mut opts: CheckOptions| {
        opts.corrupt = fault == Some(name);
        cases.push(Case { name, store, objective, opts });
    };
    let rng = &mut RngState::new(seed);
    let e = cfg.embed;

    {
        let mut s = ParamStore::new();
        let x = input_param(&mut s, "input", &[2, 2, 8], seed + 1)?;
        let block = ConvBlock::new(&mut s, rng, "conv_block", 2, ConvBlockSpec::audio(3, 3, 1), true)?;
        push(
            "conv_block_audio",
            s,
            Box::new(move |g| {
                let xv = g.param(x);
                let y = block.forward(g, xv)?;
                probe(g, y, 1)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let x = input_param(&mut s, "input", &[2, 2, 6, 6], seed + 2)?;
        let spec = ConvBlockSpec::video(3, 3, 1).with_norm(true);
        let block = ConvBlock::new(&mut s, rng, "conv_block", 2, spec, true)?;
        push(
            "conv_block_video",
            s,
            Box::new(move |g| {
                let xv = g.param(x);
                let y = block.forward(g, xv)?;
                probe(g, y, 2)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let x = input_param(&mut s, "input", &[3, 4, 5, 5], seed + 3)?;
        let spec = ChannelGateSpec { reduction: 2, gate_channels: 4, layers: 2 };
        let block = ChannelAttention::new(&mut s, rng, "channel_attention", 4, spec)?;
        push(
            "channel_attention",
            s,
            Box::new(move |g| {
                let xv = g.param(x);
                let y = block.forward(g, xv)?;
                probe(g, y, 3)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let x = input_param(&mut s, "input", &[2, 3, 6, 6], seed + 4)?;
        let spec = SpatialGateSpec { dilations: 2, filters: 2, kernel: 3 };
        let block = SpatialAttention::new(&mut s, rng, "spatial_attention", 3, spec)?;
        push(
            "spatial_attention",
            s,
            Box::new(move |g| {
                let xv = g.param(x);
                let y = block.forward(g, xv)?;
                probe(g, y, 4)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let x = random(&[2, 1, FRAME, FRAME], seed + 5);
        let block = LocalFeatureExtractor::new(&mut s, rng, "local_features", 1, ConvBlockSpec::video(2, 3, 1), true)?;
        push(
            "local_feature_extractor",
            s,
            Box::new(move |g| {
                let xv = g.input(x.clone());
                let y = block.forward(g, xv)?;
                probe(g, y, 5)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let x = input_param(&mut s, "input", &[2, 3, 6, 6], seed + 6)?;
        let block = InvertedResidualBlock::new(&mut s, rng, "inverted_residual", 3, ConvBlockSpec::video(2, 3, 1).with_pool(1), true)?;
        push(
            "inverted_residual_block",
            s,
            Box::new(move |g| {
                let xv = g.param(x);
                let y = block.forward(g, xv)?;
                probe(g, y, 6)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let c0 = cfg.video_stem.filters;
        let x = random(&[2, c0, FRAME, FRAME], seed + 7);
        let block = VideoFeatureStage::new(&mut s, rng, "video", c0, &cfg.video, cfg.conv_bias)?;
        push(
            "video_feature_stage",
            s,
            Box::new(move |g| {
                let xv = g.input(x.clone());
                let y = block.forward(g, xv)?;
                probe(g, y, 7)
            }),
            CheckOptions::block(),
        );
    }
    let spec = AttentionSpec::new(e, cfg.fusion_heads, cfg.dropout)?;
    {
        let mut s = ParamStore::new();
        let q = input_param(&mut s, "query_src", &[2, 3, e], seed + 8)?;
        let k = input_param(&mut s, "key_src", &[2, 4, e], seed + 9)?;
        let block = SelfAttention::new(&mut s, rng, "self_attention", spec)?;
        push(
            "self_attention",
            s,
            Box::new(move |g| {
                let (qv, kv) = (g.param(q), g.param(k));
                let (y, _) = block.forward(g, qv, kv)?;
                probe(g, y, 8)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let x = input_param(&mut s, "input", &[2, 3, e], seed + 10)?;
        let block = Mlp::new(&mut s, rng, "mlp", e, cfg.mlp_hidden, cfg.dropout)?;
        push(
            "mlp",
            s,
            Box::new(move |g| {
                let xv = g.param(x);
                let y = block.forward(g, xv)?;
                probe(g, y, 9)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let a = input_param(&mut s, "a", &[2, 3, e], seed + 11)?;
        let v = input_param(&mut s, "v", &[2, 4, e], seed + 12)?;
        let block = TransformerBlock::new(&mut s, rng, "transformer_block", spec, cfg.mlp_hidden)?;
        push(
            "transformer_block",
            s,
            Box::new(move |g| {
                let (av, vv) = (g.param(a), g.param(v));
                let y = block.forward(g, av, vv)?;
                probe(g, y, 10)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let q = input_param(&mut s, "q", &[2, 3, e], seed + 13)?;
        let k = input_param(&mut s, "k", &[2, 4, e], seed + 14)?;
        let v = input_param(&mut s, "v", &[2, 4, e], seed + 15)?;
        let heads = cfg.late_heads;
        push(
            "cross_attention",
            s,
            Box::new(move |g| {
                let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
                let (y, _) = cross_attention(g, qv, kv, vv, heads)?;
                probe(g, y, 11)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let q = input_param(&mut s, "query_src", &[2, 3, e], seed + 16)?;
        let c = input_param(&mut s, "context", &[2, 4, e], seed + 17)?;
        let block = CrossAttention::new(&mut s, rng, "cross_attention", e, cfg.late_heads)?;
        push(
            "cross_attention_projected",
            s,
            Box::new(move |g| {
                let (qv, cv) = (g.param(q), g.param(c));
                let y = block.forward(g, qv, cv)?;
                probe(g, y, 12)
            }),
            CheckOptions::block(),
        );
    }
    {
        let mut s = ParamStore::new();
        let model = Model::build(*cfg, Architecture::full(cfg), &mut s, rng)?;
        let b = 2;
        let audio = random(&[b, 1, cfg.audio_len], seed + 18);
        let mut vs = RngState::new(seed + 19).stream();
        let video = Tensor::from_fn(&[b, 1, cfg.frames, FRAME, FRAME], |_| vs.uniform());
        let mut labels = Tensor::zeros(&[b, cfg.classes]);
        for i in 0..b {
            labels.data_mut()[i * cfg.classes + i % cfg.classes] = 1.0;
        }
        push(
            "end_to_end",
            s,
            Box::new(move |g| {
                let (a, v) = (g.input(audio.clone()), g.input(video.clone()));
                let p = model.forward(g, a, v)?;
                g.cross_entropy(p, &labels)
            }),
            CheckOptions { tolerance: END_TO_END_TOLERANCE, per_param: Some(8), ..CheckOptions::block() },
        );
    }
    if let Some(f) = fault {
        if !cases.iter().any(|c| c.name == f) {
            return Err(Error::config(format!("no gradient-check block named `{f}`")));
        }
    }
    Ok(cases)
}

/// Block names of [`suite`], in order.
pub fn block_names() -> Vec<&'static str> {
    vec![
        "conv_block_audio",
        "conv_block_video",
        "channel_attention",
        "spatial_attention",
        "local_feature_extractor",
        "inverted_residual_block",
        "video_feature_stage",
        "self_attention",
        "mlp",
        "transformer_block",
        "cross_attention",
        "cross_attention_projected",
        "end_to_end",
    ]
}
