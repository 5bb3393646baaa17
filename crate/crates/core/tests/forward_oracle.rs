//! A second, loop-level implementation of the full forward pass in eval
//! mode, written against parameter names only. It shares no code with the
//! engine beyond reading the parameter table.

use std::collections::HashMap;

use avtca_core::blocks::{ConvBlockSpec, Modality};
use avtca_core::{build_variant, ModelConfig, ModelState, RngState, Tensor, VariantId};

const EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
struct A {
    s: Vec<usize>,
    d: Vec<f64>,
}

impl A {
    fn zeros(s: &[usize]) -> Self {
        A { s: s.to_vec(), d: vec![0.0; s.iter().product()] }
    }
}

struct Weights(HashMap<String, A>);

impl Weights {
    fn of(state: &ModelState<f64>) -> Self {
        let mut m = HashMap::new();
        for p in state.store.params() {
            m.insert(p.name.clone(), A { s: p.value.shape().to_vec(), d: p.value.data().to_vec() });
        }
        for b in state.store.buffers() {
            m.insert(b.name.clone(), A { s: b.value.shape().to_vec(), d: b.value.data().to_vec() });
        }
        Weights(m)
    }

    fn get(&self, name: &str) -> &A {
        self.0.get(name).unwrap_or_else(|| panic!("missing {name}"))
    }

    fn opt(&self, name: &str) -> Option<&A> {
        self.0.get(name)
    }
}

fn conv2d(x: &A, w: &A, b: Option<&A>, stride: usize, pad: usize, dil: usize, depthwise: bool) -> A {
    let (n, ci, h, wd) = (x.s[0], x.s[1], x.s[2], x.s[3]);
    let (co, k) = (w.s[0], w.s[2]);
    let ho = (h + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let wo = (wd + 2 * pad - dil * (k - 1) - 1) / stride + 1;
    let mut y = A::zeros(&[n, co, ho, wo]);
    for bi in 0..n {
        for o in 0..co {
            let inputs: Vec<usize> = if depthwise { vec![o] } else { (0..ci).collect() };
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map_or(0.0, |b| b.d[o]);
                    for (wi, &c) in inputs.iter().enumerate() {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky * dil) as isize - pad as isize;
                                let ix = (ox * stride + kx * dil) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.d[((bi * ci + c) * h + iy as usize) * wd + ix as usize];
                                let wv = w.d[((o * w.s[1] + wi) * k + ky) * k + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    y.d[((bi * co + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    y
}

fn conv1d(x: &A, w: &A, b: Option<&A>, stride: usize) -> A {
    let k = w.s[2];
    let pad = (k - 1) / 2;
    let (n, ci, l) = (x.s[0], x.s[1], x.s[2]);
    let co = w.s[0];
    let lo = (l + 2 * pad - k) / stride + 1;
    let mut y = A::zeros(&[n, co, lo]);
    for bi in 0..n {
        for o in 0..co {
            for t in 0..lo {
                let mut acc = b.map_or(0.0, |b| b.d[o]);
                for c in 0..ci {
                    for j in 0..k {
                        let i = (t * stride + j) as isize - pad as isize;
                        if i >= 0 && (i as usize) < l {
                            acc += x.d[(bi * ci + c) * l + i as usize] * w.d[(o * ci + c) * k + j];
                        }
                    }
                }
                y.d[(bi * co + o) * lo + t] = acc;
            }
        }
    }
    y
}

/// Eval-mode batch norm over `axis`.
fn bn(x: &A, w: &Weights, name: &str, axis: usize) -> A {
    let (g, b) = (w.get(&format!("{name}.gamma")), w.get(&format!("{name}.beta")));
    let (m, v) = (w.get(&format!("{name}.running_mean")), w.get(&format!("{name}.running_var")));
    let inner: usize = x.s[axis + 1..].iter().product();
    let c = x.s[axis];
    let mut y = x.clone();
    for (i, val) in y.d.iter_mut().enumerate() {
        let ch = (i / inner) % c;
        *val = (*val - m.d[ch]) / (v.d[ch] + EPS).sqrt() * g.d[ch] + b.d[ch];
    }
    y
}

fn map(x: &A, f: impl Fn(f64) -> f64) -> A {
    A { s: x.s.clone(), d: x.d.iter().map(|&v| f(v)).collect() }
}

fn relu(x: &A) -> A {
    map(x, |v| v.max(0.0))
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
}

/// Broadcasting product where `y` repeats over the axes it has extent 1 on.
fn mul_bcast(x: &A, y: &A) -> A {
    let mut out = x.clone();
    let rank = x.s.len();
    for (i, v) in out.d.iter_mut().enumerate() {
        let mut rem = i;
        let mut j = 0;
        let mut stride = 1;
        for ax in (0..rank).rev() {
            let idx = rem % x.s[ax];
            rem /= x.s[ax];
            if y.s[ax] != 1 {
                j += idx * stride;
            }
            stride *= y.s[ax];
        }
        *v *= y.d[j];
    }
    out
}

fn add(x: &A, y: &A) -> A {
    assert_eq!(x.s, y.s);
    A { s: x.s.clone(), d: x.d.iter().zip(&y.d).map(|(a, b)| a + b).collect() }
}

/// Max pool with window = stride = `(ph, pw)` over the last two axes.
fn max_pool(x: &A, ph: usize, pw: usize) -> A {
    let r = x.s.len();
    let (h, w) = (x.s[r - 2], x.s[r - 1]);
    let (ho, wo) = (h / ph, w / pw);
    let planes: usize = x.s[..r - 2].iter().product();
    let mut s = x.s.clone();
    s[r - 2] = ho;
    s[r - 1] = wo;
    let mut y = A::zeros(&s);
    for p in 0..planes {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..ph {
                    for dx in 0..pw {
                        m = m.max(x.d[p * h * w + (oy * ph + dy) * w + ox * pw + dx]);
                    }
                }
                y.d[(p * ho + oy) * wo + ox] = m;
            }
        }
    }
    y
}

fn max_pool1d(x: &A, p: usize) -> A {
    let y = max_pool(&A { s: vec![x.s[0], x.s[1], 1, x.s[2]], d: x.d.clone() }, 1, p);
    A { s: vec![x.s[0], x.s[1], y.s[3]], d: y.d }
}

fn gap(x: &A) -> A {
    let (n, c, hw) = (x.s[0], x.s[1], x.s[2] * x.s[3]);
    let mut y = A::zeros(&[n, c, 1, 1]);
    for i in 0..n * c {
        y.d[i] = x.d[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64;
    }
    y
}

fn concat_channels(xs: &[A]) -> A {
    let (n, h, w) = (xs[0].s[0], xs[0].s[2], xs[0].s[3]);
    let c: usize = xs.iter().map(|x| x.s[1]).sum();
    let mut d = Vec::with_capacity(n * c * h * w);
    for b in 0..n {
        for x in xs {
            let chunk = x.s[1] * h * w;
            d.extend_from_slice(&x.d[b * chunk..(b + 1) * chunk]);
        }
    }
    A { s: vec![n, c, h, w], d }
}

fn crop(x: &A, y0: usize, x0: usize, size: usize) -> A {
    let (n, c, h, w) = (x.s[0], x.s[1], x.s[2], x.s[3]);
    let mut out = A::zeros(&[n, c, size, size]);
    for p in 0..n * c {
        for r in 0..size {
            for q in 0..size {
                out.d[(p * size + r) * size + q] = x.d[(p * h + y0 + r) * w + x0 + q];
            }
        }
    }
    out
}

/// `[B, C, L] <-> [B, L, C]`
fn swap12(x: &A) -> A {
    let (b, m, n) = (x.s[0], x.s[1], x.s[2]);
    let mut y = A::zeros(&[b, n, m]);
    for i in 0..b {
        for j in 0..m {
            for k in 0..n {
                y.d[(i * n + k) * m + j] = x.d[(i * m + j) * n + k];
            }
        }
    }
    y
}

fn linear(x: &A, w: &Weights, name: &str) -> A {
    let wt = w.get(&format!("{name}.weight"));
    let b = w.opt(&format!("{name}.bias"));
    let (din, dout) = (wt.s[0], wt.s[1]);
    let rows = x.d.len() / din;
    let mut s = x.s.clone();
    *s.last_mut().unwrap() = dout;
    let mut y = A::zeros(&s);
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = b.map_or(0.0, |b| b.d[o]);
            for i in 0..din {
                acc += x.d[r * din + i] * wt.d[i * dout + o];
            }
            y.d[r * dout + o] = acc;
        }
    }
    y
}

/// Per-head scaled dot-product attention, heads concatenated.
fn attend(q: &A, k: &A, v: &A, heads: usize) -> A {
    let (b, lq, e) = (q.s[0], q.s[1], q.s[2]);
    let lk = k.s[1];
    let dh = e / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut y = A::zeros(&[b, lq, e]);
    for bi in 0..b {
        for h in 0..heads {
            for i in 0..lq {
                let scores: Vec<f64> = (0..lk)
                    .map(|j| {
                        (0..dh).map(|c| q.d[(bi * lq + i) * e + h * dh + c] * k.d[(bi * lk + j) * e + h * dh + c]).sum::<f64>() * scale
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let ex: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = ex.iter().sum();
                for c in 0..dh {
                    y.d[(bi * lq + i) * e + h * dh + c] = (0..lk).map(|j| ex[j] / z * v.d[(bi * lk + j) * e + h * dh + c]).sum();
                }
            }
        }
    }
    y
}

fn conv_block(x: &A, w: &Weights, name: &str, spec: &ConvBlockSpec) -> A {
    let wt = w.get(&format!("{name}.conv.weight"));
    let b = w.opt(&format!("{name}.conv.bias"));
    let mut y = match spec.modality {
        Modality::Audio => conv1d(x, wt, b, spec.stride),
        Modality::Video => conv2d(x, wt, b, spec.stride, (spec.kernel - 1) / 2, 1, false),
    };
    if spec.normalize {
        y = relu(&bn(&y, w, &format!("{name}.bn"), 1));
    }
    if spec.pool > 1 {
        y = match spec.modality {
            Modality::Audio => max_pool1d(&y, spec.pool),
            Modality::Video => max_pool(&y, spec.pool, spec.pool),
        };
    }
    y
}

fn video_stage(x: &A, w: &Weights, cfg: &ModelConfig) -> A {
    let vs = &cfg.video;
    // channel gate
    let mut z = gap(x);
    for i in 0..3 {
        let wt = w.get(&format!("video.channel_attention.gate{i}.conv.weight"));
        z = relu(&bn(&conv2d(&z, wt, None, 1, 0, 1, false), w, &format!("video.channel_attention.gate{i}.bn"), 1));
    }
    let ca = mul_bcast(x, &map(&z, sigmoid));
    // spatial gate
    let k = vs.spatial.kernel;
    let mut s = x.clone();
    for i in 0..vs.spatial.dilations {
        let d = 1 << i;
        let wt = w.get(&format!("video.spatial_attention.stage{i}.conv.weight"));
        s = relu(&bn(&conv2d(&s, wt, None, 1, d * (k - 1) / 2, d, false), w, &format!("video.spatial_attention.stage{i}.bn"), 1));
    }
    let head = conv2d(
        &s,
        w.get("video.spatial_attention.head.weight"),
        Some(w.get("video.spatial_attention.head.bias")),
        1,
        (k - 1) / 2,
        1,
        false,
    );
    let sa = mul_bcast(x, &map(&head, sigmoid));
    let mut att = A { s: ca.s.clone(), d: ca.d.iter().zip(&sa.d).map(|(a, b)| a * b).collect() };
    // quadrants
    let quads: Vec<A> = [("patch11", 0, 0), ("patch12", 0, 28), ("patch21", 28, 0), ("patch22", 28, 28)]
        .iter()
        .map(|&(tag, y0, x0)| conv_block(&crop(x, y0, x0, 28), w, &format!("video.local_features.{tag}"), &vs.patch))
        .collect();
    let lfr = concat_channels(&quads);
    let ratio = att.s[2] / lfr.s[2];
    if ratio > 1 {
        att = max_pool(&att, ratio, ratio);
    }
    let mut h = add(&att, &lfr);
    for (i, spec) in vs.residual.iter().enumerate() {
        let p = format!("video.residual{i}");
        let kk = spec.kernel;
        let x1 = conv2d(&h, w.get(&format!("{p}.x1.depthwise.weight")), None, spec.stride, (kk - 1) / 2, 1, true);
        let x1 = bn(&x1, w, &format!("{p}.x1.bn1"), 1);
        let x1 = conv2d(&x1, w.get(&format!("{p}.x1.pointwise.weight")), None, 1, 0, 1, false);
        let x1 = relu(&bn(&x1, w, &format!("{p}.x1.bn2"), 1));
        let x2 = conv_block(&h, w, &format!("{p}.x2.block1"), spec);
        let x2 = conv2d(&x2, w.get(&format!("{p}.x2.depthwise.weight")), None, 1, (kk - 1) / 2, 1, true);
        let x2 = conv_block(&x2, w, &format!("{p}.x2.block2"), &ConvBlockSpec { stride: 1, ..*spec });
        h = concat_channels(&[x1, x2]);
    }
    for (i, spec) in vs.tail.iter().enumerate() {
        h = conv_block(&h, w, &format!("video.tail{i}"), spec);
    }
    h
}

fn self_attention(q_src: &A, k_src: &A, w: &Weights, name: &str, heads: usize) -> A {
    let q = linear(q_src, w, &format!("{name}.w_q"));
    let k = linear(k_src, w, &format!("{name}.w_k"));
    let v = linear(k_src, w, &format!("{name}.w_v"));
    linear(&attend(&q, &k, &v, heads), w, &format!("{name}.fc"))
}

fn transformer(a: &A, v: &A, w: &Weights, name: &str, heads: usize) -> A {
    let an = bn(a, w, &format!("{name}.norm_a"), 2);
    let vn = bn(v, w, &format!("{name}.norm_v"), 2);
    let attn = self_attention(&an, &vn, w, &format!("{name}.attention"), heads);
    let n = bn(&attn, w, &format!("{name}.norm_attn"), 2);
    let h = map(&linear(&n, w, &format!("{name}.mlp.fc1")), gelu);
    let m = linear(&h, w, &format!("{name}.mlp.fc2"));
    add(&attn, &bn(&m, w, &format!("{name}.norm_mlp"), 2))
}

fn oracle_forward(cfg: &ModelConfig, w: &Weights, audio: &A, video: &A) -> A {
    let (b, t, e) = (audio.s[0], cfg.frames, cfg.embed);
    let mut a = audio.clone();
    for (i, spec) in cfg.audio.iter().enumerate() {
        a = conv_block(&a, w, &format!("audio.conv{i}"), spec);
    }
    let frames = A { s: vec![b * t, 1, 56, 56], d: video.d.clone() };
    let v = conv_block(&frames, w, "video.stem", &cfg.video_stem);
    let v = gap(&video_stage(&v, w, cfg));
    let v_conv = swap12(&A { s: vec![b, t, e], d: v.d });

    let (a_proj, v_proj) = (swap12(&a), swap12(&v_conv));
    let h_av = transformer(&v_proj, &a_proj, w, "transformer.av", cfg.fusion_heads);
    let h_va = transformer(&a_proj, &v_proj, w, "transformer.va", cfg.fusion_heads);
    let mut xa = add(&swap12(&h_av), &a);
    let mut xv = add(&swap12(&h_va), &v_conv);
    for i in 0..2 {
        xa = conv_block(&xa, w, &format!("post_audio.conv{i}"), &cfg.post_audio[i]);
        xv = conv_block(&xv, w, &format!("post_video.conv{i}"), &cfg.post_video[i]);
    }
    let (xa, xv) = (swap12(&xa), swap12(&xv));
    let xa2 = add(&xa, &self_attention(&xa, &xv, w, "exchange.av", cfg.fusion_heads));
    let xv2 = add(&xv, &self_attention(&xv, &xa, w, "exchange.va", cfg.fusion_heads));
    let late = |q_src: &A, ctx: &A, name: &str| {
        let q = linear(q_src, w, &format!("{name}.w_q"));
        let k = linear(ctx, w, &format!("{name}.w_k"));
        let v = linear(ctx, w, &format!("{name}.w_v"));
        attend(&q, &k, &v, cfg.late_heads)
    };
    let ya = late(&xa2, &xv2, "cross_attention.audio");
    let yv = late(&xv2, &xa2, "cross_attention.video");
    let seq_max = |y: &A| {
        let (bb, l, ee) = (y.s[0], y.s[1], y.s[2]);
        let mut out = A::zeros(&[bb, ee]);
        for i in 0..bb {
            for c in 0..ee {
                out.d[i * ee + c] = (0..l).map(|j| y.d[(i * l + j) * ee + c]).fold(f64::NEG_INFINITY, f64::max);
            }
        }
        out
    };
    let pooled = add(&seq_max(&ya), &seq_max(&yv));
    let logits = linear(&pooled, w, "classifier");
    let c = cfg.classes;
    let mut probs = logits.clone();
    for row in probs.d.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        for v in row.iter_mut() {
            *v = (*v - m).exp() / z;
        }
    }
    probs
}

/// Every parameter and running statistic moved off its initial value so no
/// stage is an identity by accident.
fn perturbed_state(seed: u64) -> ModelState<f64> {
    let mut state = build_variant::<f64>(VariantId::Full, ModelConfig::tiny(), seed).unwrap();
    let mut s = RngState::new(seed + 100).stream();
    for p in state.store.params_mut() {
        let name = p.name.clone();
        p.value = Tensor::from_fn(p.value.shape(), |i| {
            let base = p.value.data()[i];
            if name.ends_with("gamma") {
                s.uniform_in(0.5, 1.5)
            } else if name.ends_with("beta") || name.ends_with("bias") {
                0.3 * s.normal()
            } else {
                base + 0.1 * s.normal()
            }
        });
    }
    for b in state.store.buffers_mut() {
        let var = b.name.ends_with("running_var");
        b.value = Tensor::from_fn(b.value.shape(), |_| if var { s.uniform_in(0.5, 2.0) } else { 0.2 * s.normal() });
    }
    state
}

#[test]
fn engine_forward_matches_loop_level_oracle() {
    let cfg = ModelConfig::tiny();
    for seed in [1, 2] {
        let state = perturbed_state(seed);
        let mut s = RngState::new(seed + 7).stream();
        let b = 3;
        let audio = Tensor::from_fn(&[b, 1, cfg.audio_len], |_| s.normal());
        let video = Tensor::from_fn(&[b, 1, cfg.frames, 56, 56], |_| s.uniform());
        let got = state.predict(audio.clone(), video.clone()).unwrap();
        let want = oracle_forward(
            &cfg,
            &Weights::of(&state),
            &A { s: audio.shape().to_vec(), d: audio.data().to_vec() },
            &A { s: video.shape().to_vec(), d: video.data().to_vec() },
        );
        assert_eq!(got.shape(), &want.s[..]);
        for (g, w) in got.data().iter().zip(&want.d) {
            assert!((g - w).abs() < 1e-10, "engine {g} vs oracle {w}");
        }
        // the probabilities are not all alike, so the comparison has teeth
        let spread = want.d.iter().cloned().fold(0.0, f64::max) - want.d.iter().cloned().fold(1.0, f64::min);
        assert!(spread > 0.05, "{:?}", want.d);
    }
}
