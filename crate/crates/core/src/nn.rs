//! Parameterised building blocks shared by the models.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AttentionSpec, Segment, Tape, Unary, Var};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Identity,
    Tanh,
    Silu,
}

impl Activation {
    pub fn unary(self) -> Unary {
        match self {
            Activation::Relu => Unary::Relu,
            Activation::Identity => Unary::Identity,
            Activation::Tanh => Unary::Tanh,
            Activation::Silu => Unary::Silu,
        }
    }
}

/// `x W + b` with `W: d_in x d_out`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Gaussian weights scaled by `1/sqrt(d_in)`, zero bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        let std = 1.0 / libm::sqrt(d_in.max(1) as f64);
        Self::with_std(store, rng, name, d_in, d_out, bias, std)
    }

    pub fn with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        std: f64,
    ) -> Self {
        let w = store.insert(&format!("{name}.w"), Matrix::randn(d_in, d_out, std, rng));
        let b = bias.then(|| store.insert(&format!("{name}.b"), Matrix::zeros(1, d_out)));
        Self { w, b, d_in, d_out }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add(y, b)
            }
            None => y,
        }
    }

    /// Plain evaluation outside a tape.
    pub fn apply(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut y = x.matmul(store.get(self.w));
        if let Some(b) = self.b {
            let b = store.get(b);
            for r in 0..y.rows {
                for (o, bi) in y.row_mut(r).iter_mut().zip(&b.data) {
                    *o += bi;
                }
            }
        }
        y
    }
}

/// Layer normalisation with learnable gain and bias.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        let gain = store.insert(&format!("{name}.gain"), Matrix::filled(1, d, 1.0));
        let bias = store.insert(&format!("{name}.bias"), Matrix::zeros(1, d));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let n = tape.layer_norm(x, 1e-5);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul(n, g);
        tape.add(y, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, heads: usize) -> Self {
        assert!(heads >= 1 && d.is_multiple_of(heads), "heads must divide the model width");
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), d, d, true),
            // A key bias shifts every logit of a query equally, so it is omitted.
            k: Linear::new(store, rng, &format!("{name}.k"), d, d, false),
            v: Linear::new(store, rng, &format!("{name}.v"), d, d, true),
            o: Linear::new(store, rng, &format!("{name}.o"), d, d, true),
            heads,
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        queries: Var,
        keys: Var,
        spec: Rc<AttentionSpec>,
    ) -> Var {
        let q = self.q.forward(tape, store, queries);
        let k = self.k.forward(tape, store, keys);
        let v = self.v.forward(tape, store, keys);
        let a = tape.attention(q, k, v, spec);
        self.o.forward(tape, store, a)
    }
}

/// Two-layer ReLU feed-forward block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d: usize, hidden: usize) -> Self {
        Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), d, hidden, true),
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, d, true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.l1.forward(tape, store, x);
        let h = tape.relu(h);
        self.l2.forward(tape, store, h)
    }
}

/// Pre-norm transformer encoder layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), d, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, hidden),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, spec: Rc<AttentionSpec>) -> Var {
        let h = self.ln1.forward(tape, store, x);
        let a = self.attn.forward(tape, store, h, h, spec);
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, store, x);
        let f = self.ff.forward(tape, store, h);
        tape.add(x, f)
    }
}

/// Pre-norm transformer decoder layer: masked self-attention,
/// cross-attention over the encoder memory, feed-forward.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderLayer {
    pub ln1: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln3: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        heads: usize,
        hidden: usize,
    ) -> Self {
        Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), d),
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self"), d, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), d),
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross"), d, heads),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), d),
            ff: FeedForward::new(store, rng, &format!("{name}.ff"), d, hidden),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        memory: Var,
        self_spec: Rc<AttentionSpec>,
        cross_spec: Rc<AttentionSpec>,
    ) -> Var {
        let h = self.ln1.forward(tape, store, x);
        let a = self.self_attn.forward(tape, store, h, h, self_spec);
        let x = tape.add(x, a);
        let h = self.ln2.forward(tape, store, x);
        let c = self.cross_attn.forward(tape, store, h, memory, cross_spec);
        let x = tape.add(x, c);
        let h = self.ln3.forward(tape, store, x);
        let f = self.ff.forward(tape, store, h);
        tape.add(x, f)
    }
}

/// Self-attention segments for consecutive blocks of the given lengths.
pub fn self_segments(lengths: &[usize]) -> Vec<Segment> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let s = Segment { q_start: start, q_len: len, k_start: start, k_len: len };
            start += len;
            s
        })
        .collect()
}

/// Cross-attention segments pairing query blocks with key blocks.
pub fn cross_segments(q_lengths: &[usize], k_lengths: &[usize]) -> Vec<Segment> {
    assert_eq!(q_lengths.len(), k_lengths.len(), "segment count mismatch");
    let (mut qs, mut ks) = (0, 0);
    q_lengths
        .iter()
        .zip(k_lengths)
        .map(|(&ql, &kl)| {
            let s = Segment { q_start: qs, q_len: ql, k_start: ks, k_len: kl };
            qs += ql;
            ks += kl;
            s
        })
        .collect()
}

/// Fixed sinusoidal position encodings, `len x d`.
pub fn sinusoidal_positions(len: usize, d: usize) -> Matrix {
    let mut m = Matrix::zeros(len, d);
    for pos in 0..len {
        for i in 0..d {
            let rate = libm::pow(10_000.0, (2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            m.set(pos, i, if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
        }
    }
    m
}
