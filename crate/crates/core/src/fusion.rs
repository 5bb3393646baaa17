//! Attention layers used for fusing the two streams.
//!
//! Sequences are `[B, L, e]`. Heads are contiguous slices of the embedding
//! axis: head `i` owns columns `i*d_k..(i+1)*d_k`.

use alloc::format;

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{BatchNorm, Linear};
use crate::ops::Activation;
use crate::param::ParamStore;
use crate::rng::RngState;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AttentionSpec {
    pub embed: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl AttentionSpec {
    pub fn new(embed: usize, heads: usize, dropout: f64) -> Result<Self> {
        let s = Self { embed, heads, dropout };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.embed == 0 || !self.embed.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "embedding dim {} must be a positive multiple of the head count {}",
                self.embed, self.heads
            )));
        }
        crate::ops::activation::check_rate(self.dropout)
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }

    /// `1 / sqrt(d_k)`
    pub fn scale(&self) -> f64 {
        1.0 / libm::sqrt(self.head_dim() as f64)
    }
}

/// `[B, L, e] -> [B, n, L, e/n]`
pub fn split_heads<T: Scalar>(g: &mut Graph<'_, T>, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    if s.len() != 3 || !s[2].is_multiple_of(heads) {
        return Err(Error::shape("split_heads", format!("cannot split into {heads} heads"), &s, &[]));
    }
    let r = g.reshape(x, &[s[0], s[1], heads, s[2] / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[B, n, L, d] -> [B, L, n*d]`
pub fn merge_heads<T: Scalar>(g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
    let p = g.permute(x, &[0, 2, 1, 3])?;
    let s = g.shape(p).to_vec();
    g.reshape(p, &[s[0], s[1], s[2] * s[3]])
}

/// `softmax(q k^T * scale)` over the key axis for `[B, n, L, d]` heads.
fn attention_weights<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, scale: f64) -> Result<Var> {
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, T::from_f64(scale));
    g.softmax(scaled, 3)
}

fn check_pair<T: Scalar>(g: &Graph<'_, T>, op: &'static str, a: Var, b: Var, embed: usize) -> Result<()> {
    let (sa, sb) = (g.shape(a), g.shape(b));
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != embed || sb[2] != embed {
        return Err(Error::shape(op, format!("expected [B, L, {embed}] on both sides"), sa, sb));
    }
    Ok(())
}

/// Multi-head scaled dot-product attention over already projected
/// `q: [B, L_q, e]`, `k, v: [B, L_k, e]`; heads are concatenated with no
/// output projection. Returns the output and the `[B, n, L_q, L_k]` weights.
pub fn cross_attention<T: Scalar>(g: &mut Graph<'_, T>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let e = g.shape(q).last().copied().unwrap_or(0);
    let spec = AttentionSpec::new(e, heads, 0.0)?;
    check_pair(g, "cross_attention", q, k, e)?;
    check_pair(g, "cross_attention", k, v, e)?;
    if g.shape(k)[1] != g.shape(v)[1] {
        return Err(Error::shape("cross_attention", "keys and values differ in length", g.shape(k), g.shape(v)));
    }
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let vh = split_heads(g, v, heads)?;
    let w = attention_weights(g, qh, kh, spec.scale())?;
    let o = g.matmul(w, vh)?;
    Ok((merge_heads(g, o)?, w))
}

/// Attention with learnable `W_q`, `W_k`, `W_v`: queries come from one
/// sequence, keys and values from another. The attended values pass a
/// fully connected layer and dropout.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub spec: AttentionSpec,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl SelfAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut RngState, name: &str, spec: AttentionSpec) -> Result<Self> {
        spec.validate()?;
        let e = spec.embed;
        Ok(Self {
            spec,
            query: Linear::new(store, rng, &format!("{name}.w_q"), e, e, false)?,
            key: Linear::new(store, rng, &format!("{name}.w_k"), e, e, false)?,
            value: Linear::new(store, rng, &format!("{name}.w_v"), e, e, false)?,
            out: Linear::new(store, rng, &format!("{name}.fc"), e, e, true)?,
        })
    }

    /// Returns the output `[B, L_q, e]` and the `[B, n, L_q, L_k]` weights.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, query_src: Var, key_src: Var) -> Result<(Var, Var)> {
        check_pair(g, "self_attention", query_src, key_src, self.spec.embed)?;
        let n = self.spec.heads;
        let q = self.query.forward(g, query_src)?;
        let k = self.key.forward(g, key_src)?;
        let v = self.value.forward(g, key_src)?;
        let (qh, kh, vh) = (split_heads(g, q, n)?, split_heads(g, k, n)?, split_heads(g, v, n)?);
        let w = attention_weights(g, qh, kh, self.spec.scale())?;
        let dropped = g.dropout(w, self.spec.dropout)?;
        let o = g.matmul(dropped, vh)?;
        let merged = merge_heads(g, o)?;
        let y = self.out.forward(g, merged)?;
        Ok((g.dropout(y, self.spec.dropout)?, w))
    }
}

/// `fc(e -> h) -> GELU -> dropout -> fc(h -> e) -> dropout`
#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut RngState,
        name: &str,
        embed: usize,
        hidden: usize,
        dropout: f64,
    ) -> Result<Self> {
        crate::ops::activation::check_rate(dropout)?;
        Ok(Self {
            fc1: Linear::new(store, rng, &format!("{name}.fc1"), embed, hidden, true)?,
            fc2: Linear::new(store, rng, &format!("{name}.fc2"), hidden, embed, true)?,
            dropout,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.fc1.forward(g, x)?;
        let a = g.activation(h, Activation::Gelu);
        let d = g.dropout(a, self.dropout)?;
        let y = self.fc2.forward(g, d)?;
        g.dropout(y, self.dropout)
    }
}

/// Two-input transformer block with batch norm over the embedding axis:
///
/// ```text
/// attn = SA(query = BN(a), keys = BN(v))
/// out  = attn + BN(MLP(BN(dropout(attn))))
/// ```
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub norm_a: BatchNorm,
    pub norm_v: BatchNorm,
    pub attention: SelfAttention,
    pub norm_attn: BatchNorm,
    pub mlp: Mlp,
    pub norm_mlp: BatchNorm,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut RngState, name: &str, spec: AttentionSpec, hidden: usize) -> Result<Self> {
        let e = spec.embed;
        Ok(Self {
            norm_a: BatchNorm::new(store, &format!("{name}.norm_a"), e, 2)?,
            norm_v: BatchNorm::new(store, &format!("{name}.norm_v"), e, 2)?,
            attention: SelfAttention::new(store, rng, &format!("{name}.attention"), spec)?,
            norm_attn: BatchNorm::new(store, &format!("{name}.norm_attn"), e, 2)?,
            mlp: Mlp::new(store, rng, &format!("{name}.mlp"), e, hidden, spec.dropout)?,
            norm_mlp: BatchNorm::new(store, &format!("{name}.norm_mlp"), e, 2)?,
        })
    }

    /// Output has the length of `a`, whatever the length of `v`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, a: Var, v: Var) -> Result<Var> {
        check_pair(g, "transformer_block", a, v, self.attention.spec.embed)?;
        let an = self.norm_a.forward(g, a)?;
        let vn = self.norm_v.forward(g, v)?;
        let (attn, _) = self.attention.forward(g, an, vn)?;
        let d = g.dropout(attn, self.attention.spec.dropout)?;
        let n = self.norm_attn.forward(g, d)?;
        let m = self.mlp.forward(g, n)?;
        let mn = self.norm_mlp.forward(g, m)?;
        g.add(attn, mn)
    }
}

/// Projects queries from one stream and keys/values from the other, then
/// applies [`cross_attention`].
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
}

impl CrossAttention {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut RngState, name: &str, embed: usize, heads: usize) -> Result<Self> {
        AttentionSpec::new(embed, heads, 0.0)?;
        Ok(Self {
            heads,
            query: Linear::new(store, rng, &format!("{name}.w_q"), embed, embed, false)?,
            key: Linear::new(store, rng, &format!("{name}.w_k"), embed, embed, false)?,
            value: Linear::new(store, rng, &format!("{name}.w_v"), embed, embed, false)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, query_src: Var, context: Var) -> Result<Var> {
        let q = self.query.forward(g, query_src)?;
        let k = self.key.forward(g, context)?;
        let v = self.value.forward(g, context)?;
        Ok(cross_attention(g, q, k, v, self.heads)?.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::ops;
    use crate::tensor::Tensor;

    fn set(store: &mut ParamStore<f64>, name: &str, value: Tensor<f64>) {
        let id = store.find(name).unwrap();
        store.param_mut(id).value = value;
    }

    fn sa_store(e: usize, n: usize) -> (ParamStore<f64>, SelfAttention) {
        let mut store = ParamStore::new();
        let sa = SelfAttention::new(&mut store, &mut RngState::new(11), "sa", AttentionSpec::new(e, n, 0.1).unwrap()).unwrap();
        (store, sa)
    }

    #[test]
    fn spec_rejects_indivisible_heads() {
        assert!(matches!(AttentionSpec::new(6, 4, 0.1), Err(Error::Config(_))));
        assert!((AttentionSpec::new(8, 2, 0.0).unwrap().scale() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_key_attends_fully() {
        let (store, sa) = sa_store(4, 2);
        let mut rng = RngState::new(0);
        let mut g = Graph::new(&store, &mut rng, Mode::Eval);
        let q = g.input(Tensor::from_fn(&[2, 3, 4], |i| (i as f64).sin()));
        let k = g.input(Tensor::from_fn(&[2, 1, 4], |i| (i as f64).cos()));
        let (y, w) = sa.forward(&mut g, q, k).unwrap();
        assert!(g.value(w).data().iter().all(|&v| v == 1.0));
        assert_eq!(g.shape(y), &[2, 3, 4]);
        // every query row gets the same projected value token
        let yv = g.value(y);
        for b in 0..2 {
            for l in 1..3 {
                for c in 0..4 {
                    assert!((yv.at(&[b, l, c]) - yv.at(&[b, 0, c])).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn identical_keys_split_evenly() {
        let (store, sa) = sa_store(4, 1);
        let mut rng = RngState::new(0);
        let mut g = Graph::new(&store, &mut rng, Mode::Eval);
        let q = g.input(Tensor::from_fn(&[1, 3, 4], |i| i as f64 * 0.3));
        let k = g.input(Tensor::from_fn(&[1, 2, 4], |i| (i % 4) as f64));
        let (_, w) = sa.forward(&mut g, q, k).unwrap();
        assert!(g.value(w).data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn two_token_weights_by_hand() {
        let (mut store, sa) = sa_store(2, 1);
        set(&mut store, "sa.w_q.weight", Tensor::eye(2));
        set(&mut store, "sa.w_k.weight", Tensor::eye(2));
        let mut rng = RngState::new(0);
        let mut g = Graph::new(&store, &mut rng, Mode::Eval);
        let q = g.input(Tensor::from_f64(&[1, 1, 2], &[1.0, 0.0]).unwrap());
        let k = g.input(Tensor::from_f64(&[1, 2, 2], &[2.0, 0.0, 0.0, 1.0]).unwrap());
        let (_, w) = sa.forward(&mut g, q, k).unwrap();
        // scores 2/sqrt2 and 0
        let s = 2.0 / 2f64.sqrt();
        let p0 = s.exp() / (s.exp() + 1.0);
        let wv = g.value(w).data();
        assert!((wv[0] - p0).abs() < 1e-15);
        assert!((wv[1] - (1.0 - p0)).abs() < 1e-15);
    }

    #[test]
    fn embedding_mismatch_is_shape_error() {
        let (store, sa) = sa_store(4, 2);
        let mut rng = RngState::new(0);
        let mut g = Graph::new(&store, &mut rng, Mode::Eval);
        let q = g.input(Tensor::ones(&[1, 2, 4]));
        let k = g.input(Tensor::ones(&[1, 2, 3]));
        assert!(sa.forward(&mut g, q, k).unwrap_err().is_shape());
    }

    fn mlp_store(e: usize, h: usize) -> (ParamStore<f64>, Mlp) {
        let mut store = ParamStore::new();
        let m = Mlp::new(&mut store, &mut RngState::new(12), "mlp", e, h, 0.1).unwrap();
        (store, m)
    }

    #[test]
    fn mlp_zero_weights_zero_output() {
        let (mut store, m) = mlp_store(3, 5);
        for p in store.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        let mut rng = RngState::new(0);
        let mut g = Graph::new(&store, &mut rng, Mode::Eval);
        let x = g.input(Tensor::from_fn(&[2, 3], |i| i as f64));
        let y = m.forward(&mut g, x).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn mlp_identity_weights_pass_gelu() {
        let (mut store, m) = mlp_store(3, 3);
        set(&mut store, "mlp.fc1.weight", Tensor::eye(3));
        set(&mut store, "mlp.fc2.weight", Tensor::eye(3));
        let x = Tensor::from_f64(&[1, 3], &[-1.0, 0.5, 2.0]).unwrap();
        let mut rng = RngState::new(0);
        let mut g = Graph::new(&store, &mut rng, Mode::Eval);
        let xv = g.input(x.clone());
        let y = m.forward(&mut g, xv).unwrap();
        assert_eq!(g.value(y), &ops::activation(&x, Activation::Gelu));
    }

    #[test]
    fn mlp_one_vector_by_hand() {
        let (mut store, m) = mlp_store(2, 1);
        set(&mut store, "mlp.fc1.weight", Tensor::from_f64(&[2, 1], &[1.0, -2.0]).unwrap());
        set(&mut store, "mlp.fc1.bias", Tensor::from_f64(&[1], &[0.5]).unwrap());
        set(&mut store, "mlp.fc2.weight", Tensor::from_f64(&[1, 2], &[3.0, -1.0]).unwrap());
        set(&mut store, "mlp.fc2.bias", Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap());
        let mut rng = RngState::new(0);
        let mut g = Graph::new(&store, &mut rng, Mode::Eval);
        let x = g.input(Tensor::from_f64(&[1, 2], &[2.0, 0.25]).unwrap());
        let y = m.forward(&mut g, x).unwrap();
        let h = Activation::Gelu.apply(2.0 - 0.5 + 0.5);
        assert_eq!(g.value(y).data(), &[3.0 * h, -h + 1.0]);
    }

    fn tb(e: usize, n: usize) -> (ParamStore<f64>, TransformerBlock) {
        let mut store = ParamStore::new();
        let t = TransformerBlock::new(&mut store, &mut RngState::new(13), "tb", AttentionSpec::new(e, n, 0.1).unwrap(), 2 * e).unwrap();
        (store, t)
    }

    #[test]
    fn transformer_output_follows_first_argument_length() {
        let (store, t) = tb(4, 2);
        for lv in [1, 3, 5] {
            let mut rng = RngState::new(1);
            let mut g = Graph::new(&store, &mut rng, Mode::Train);
            let a = g.input(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin()));
            let v = g.input(Tensor::from_fn(&[2, lv, 4], |i| (i as f64 * 0.3).cos()));
            let y = t.forward(&mut g, a, v).unwrap();
            assert_eq!(g.shape(y), &[2, 3, 4]);
        }
    }

    #[test]
    fn transformer_zeroed_mlp_returns_attention() {
        let (mut store, t) = tb(4, 2);
        set(&mut store, "tb.norm_mlp.gamma", Tensor::zeros(&[4]));
        let mut rng = RngState::new(0);
        let mut g = Graph::new(&store, &mut rng, Mode::Eval);
        let a = g.input(Tensor::from_fn(&[2, 3, 4], |i| (i as f64 * 0.7).sin()));
        let v = g.input(Tensor::from_fn(&[2, 2, 4], |i| (i as f64 * 0.3).cos()));
        let y = t.forward(&mut g, a, v).unwrap();
        let an = t.norm_a.forward(&mut g, a).unwrap();
        let vn = t.norm_v.forward(&mut g, v).unwrap();
        let (attn, _) = t.attention.forward(&mut g, an, vn).unwrap();
        assert_eq!(g.value(y), g.value(attn));
    }

    fn naive_heads(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>, n: usize) -> Tensor<f64> {
        let (b, lq, e) = (q.shape()[0], q.shape()[1], q.shape()[2]);
        let lk = k.shape()[1];
        let dk = e / n;
        let mut out = Tensor::zeros(&[b, lq, e]);
        for bi in 0..b {
            for h in 0..n {
                for i in 0..lq {
                    let scores: alloc::vec::Vec<f64> = (0..lk)
                        .map(|j| (0..dk).map(|c| q.at(&[bi, i, h * dk + c]) * k.at(&[bi, j, h * dk + c])).sum::<f64>() / (dk as f64).sqrt())
                        .collect();
                    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
                    for c in 0..dk {
                        let val: f64 = (0..lk).map(|j| (scores[j] - m).exp() / z * v.at(&[bi, j, h * dk + c])).sum();
                        out.data_mut()[(bi * lq + i) * e + h * dk + c] = val;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn cross_attention_matches_naive_slicing() {
        let store = ParamStore::<f64>::new();
        let mut r = RngState::new(21);
        for (n, e) in [(1, 4), (2, 4), (4, 4), (3, 6)] {
            let mut s = r.stream();
            let q = Tensor::from_fn(&[2, 3, e], |_| s.uniform_in(-2.0, 2.0));
            let k = Tensor::from_fn(&[2, 4, e], |_| s.uniform_in(-2.0, 2.0));
            let v = Tensor::from_fn(&[2, 4, e], |_| s.uniform_in(-2.0, 2.0));
            let mut rng = RngState::new(0);
            let mut g = Graph::new(&store, &mut rng, Mode::Eval);
            let (qv, kv, vv) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
            let (y, _) = cross_attention(&mut g, qv, kv, vv, n).unwrap();
            let expect = naive_heads(&q, &k, &v, n);
            assert!(g.value(y).max_abs_diff(&expect).unwrap() < 1e-12, "n={n}");
        }
    }

    #[test]
    fn cross_attention_two_heads_by_hand() {
        let store = ParamStore::<f64>::new();
        let mut rng = RngState::new(0);
        let mut g = Graph::new(&store, &mut rng, Mode::Eval);
        // e = 2, n = 2, d_k = 1: head 0 uses column 0, head 1 column 1
        let q = g.input(Tensor::from_f64(&[1, 1, 2], &[1.0, -1.0]).unwrap());
        let k = g.input(Tensor::from_f64(&[1, 2, 2], &[1.0, 0.0, 0.0, 2.0]).unwrap());
        let v = g.input(Tensor::from_f64(&[1, 2, 2], &[10.0, 20.0, 30.0, 40.0]).unwrap());
        let (y, _) = cross_attention(&mut g, q, k, v, 2).unwrap();
        let h0 = {
            let (a, b) = (1.0f64.exp(), 1.0);
            (a * 10.0 + b * 30.0) / (a + b)
        };
        let h1 = {
            let (a, b) = (1.0, (-2.0f64).exp());
            (a * 20.0 + b * 40.0) / (a + b)
        };
        let out = g.value(y).data();
        assert!((out[0] - h0).abs() < 1e-12 && (out[1] - h1).abs() < 1e-12);
    }

    #[test]
    fn cross_attention_indivisible_heads_is_config_error() {
        let store = ParamStore::<f64>::new();
        let mut rng = RngState::new(0);
        let mut g = Graph::new(&store, &mut rng, Mode::Eval);
        let q = g.input(Tensor::ones(&[1, 2, 6]));
        assert!(matches!(cross_attention(&mut g, q, q, q, 4), Err(Error::Config(_))));
    }
}
