//! Reverse-mode automatic differentiation over [`Matrix`] values.
//!
//! A [`Tape`] records every operation of one forward pass. Calling
//! [`Tape::backward`] on a `1 x 1` node walks the record in reverse and
//! returns the gradient of that scalar with respect to every node that
//! (transitively) depends on a trainable parameter.
//!
//! Besides the elementwise and linear-algebra primitives the tape carries a
//! few fused kernels with hand-written adjoints: segmented multi-head
//! attention, the selective state-space scan, row-wise layer normalisation
//! and the two classification losses. All of them are covered by finite
//! difference checks.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, Matrix};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Identity,
    Relu,
    Silu,
    Sigmoid,
    Tanh,
    Exp,
    Softplus,
    Square,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Identity => x,
            Unary::Relu => x.max(0.0),
            Unary::Silu => x * sigmoid(x),
            Unary::Sigmoid => sigmoid(x),
            Unary::Tanh => libm::tanh(x),
            Unary::Exp => libm::exp(x),
            Unary::Softplus => softplus(x),
            Unary::Square => x * x,
        }
    }

    /// Derivative given the input `x` and the output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Identity => 1.0,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Tanh => 1.0 - y * y,
            Unary::Exp => y,
            Unary::Softplus => sigmoid(x),
            Unary::Square => 2.0 * x,
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + libm::log1p(libm::exp(-x.abs()))
}

/// How the second operand of a binary elementwise op is broadcast.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(a: &Matrix, b: &Matrix) -> Bcast {
    if a.shape() == b.shape() {
        Bcast::Same
    } else if b.rows == 1 && b.cols == a.cols {
        Bcast::Row
    } else if b.cols == 1 && b.rows == a.rows {
        Bcast::Col
    } else if b.rows == 1 && b.cols == 1 {
        Bcast::Scalar
    } else {
        panic!("cannot broadcast {:?} onto {:?}", b.shape(), a.shape());
    }
}

#[inline]
fn bcast_index(kind: Bcast, cols: usize, i: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::Scalar => 0,
    }
}

/// One query/key block of a segmented attention call. Rows
/// `q_start..q_start+q_len` of the queries attend to rows
/// `k_start..k_start+k_len` of the keys/values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub segments: Vec<Segment>,
    /// Query `i` of a segment only sees keys `0..=i` of the same segment.
    pub causal: bool,
}

/// Discretisation of the continuous state-space input matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Discretization {
    /// `B̄ = (exp(ΔA) - 1) / A · B`.
    Zoh,
    /// `B̄ = Δ · B`.
    Euler,
}

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var, Bcast),
    Sub(Var, Var, Bcast),
    Mul(Var, Var, Bcast),
    Scale(Var, f64),
    Unary(Var, Unary),
    Transpose(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    SoftmaxRows(Var),
    LayerNorm(Var, Vec<f64>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        spec: Rc<AttentionSpec>,
        probs: Vec<f64>,
    },
    SelectiveScan {
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        reverse: bool,
        disc: Discretization,
        states: Vec<f64>,
    },
    BceWithLogits(Var, Matrix),
    SoftmaxCrossEntropy(Var, Vec<Option<usize>>, Matrix),
}

struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<ParamId, Var>,
    /// When set, only parameters whose name starts with one of these
    /// prefixes are trainable; the rest enter the tape as constants.
    trainable: Option<Vec<String>>,
    constants: BTreeMap<ParamId, Var>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Gradients of every trainable parameter that was placed on the tape and
    /// received a signal, in parameter order.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Matrix)> + '_ {
        self.params.iter().filter_map(|&(id, v)| self.grads[v.0].as_ref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&Matrix> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|&(_, v)| self.grads[v.0].as_ref())
    }

    /// Euclidean norm over all parameter gradients.
    pub fn global_norm(&self) -> f64 {
        libm::sqrt(self.params().map(|(_, g)| g.data.iter().map(|x| x * x).sum::<f64>()).sum())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which only parameters named with one of `prefixes` are
    /// trainable.
    pub fn training(prefixes: &[&str]) -> Self {
        Self { trainable: Some(prefixes.iter().map(|p| String::from(*p)).collect()), ..Self::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "scalar() on non-scalar node");
        m.data[0]
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient without being a stored parameter.
    pub fn input(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Places a trainable parameter on the tape. Repeated calls with the same
    /// id return the same node so gradients accumulate in one place.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id).or_else(|| self.constants.get(&id)) {
            return v;
        }
        let name = store.name(id);
        let trainable = self.trainable.as_ref().is_none_or(|ps| ps.iter().any(|p| name.starts_with(p.as_str())));
        let v = if trainable {
            let v = self.push(store.get(id).clone(), Op::Param, true);
            self.params.insert(id, v);
            v
        } else {
            let v = self.constant(store.get(id).clone());
            self.constants.insert(id, v);
            v
        };
        v
    }

    /// Places a parameter on the tape as a constant (frozen for this pass).
    pub fn frozen(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.constant(store.get(id).clone())
    }

    /// `param` or `frozen` depending on `trainable`.
    pub fn param_if(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        if trainable {
            self.param(store, id)
        } else {
            self.frozen(store, id)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> (Matrix, Bcast) {
        let (am, bm) = (self.value(a), self.value(b));
        let kind = bcast_kind(am, bm);
        let cols = am.cols;
        let data = am
            .data
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bm.data[bcast_index(kind, cols, i)]))
            .collect();
        (Matrix::from_vec(am.rows, am.cols, data), kind)
    }

    /// `a + b`, with `b` broadcast as a row, a column or a scalar if needed.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (value, kind) = self.binary(a, b, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b, kind), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (value, kind) = self.binary(a, b, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b, kind), rg)
    }

    /// Elementwise product with broadcasting of `b`.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (value, kind) = self.binary(a, b, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b, kind), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        if f == Unary::Identity {
            return a;
        }
        let value = self.value(a).map(|x| f.apply(x));
        let rg = self.rg(a);
        self.push(value, Op::Unary(a, f), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(value, Op::Transpose(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows, rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(Matrix::from_vec(rows, cols, data), Op::ConcatRows(parts.to_vec()), rg)
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice_cols out of range");
        let mut out = Matrix::zeros(m.rows, len);
        for r in 0..m.rows {
            out.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::SliceCols(a, start), rg)
    }

    /// Rows `idx[0], idx[1], ...`; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let value = self.value(a).gather_rows(idx);
        let rg = self.rg(a);
        self.push(value, Op::GatherRows(a, idx.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Matrix::filled(1, 1, self.value(a).sum());
        let rg = self.rg(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Column sums: `n x m -> 1 x m`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(1, m.cols);
        for r in 0..m.rows {
            for (o, x) in out.data.iter_mut().zip(m.row(r)) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SumRows(a), rg)
    }

    /// Row sums: `n x m -> n x 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let data = (0..m.rows).map(|r| m.row(r).iter().sum()).collect();
        let out = Matrix::from_vec(m.rows, 1, data);
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        let rg = self.rg(a);
        self.push(value, Op::SoftmaxRows(a), rg)
    }

    /// Row-wise standardisation without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let m = self.value(a);
        let mut out = Matrix::zeros(m.rows, m.cols);
        let mut inv_std = Vec::with_capacity(m.rows);
        let n = m.cols as f64;
        for r in 0..m.rows {
            let row = m.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
            let is = 1.0 / libm::sqrt(var + eps);
            for (o, x) in out.row_mut(r).iter_mut().zip(row) {
                *o = (x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a, inv_std), rg)
    }

    /// Scaled dot-product attention over independent segments with
    /// `spec.heads` heads splitting the model dimension.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: Rc<AttentionSpec>) -> Var {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols;
        assert_eq!(km.cols, d, "attention key width");
        assert_eq!(vm.cols, d, "attention value width");
        assert_eq!(km.rows, vm.rows, "attention key/value rows");
        assert!(spec.heads >= 1 && d % spec.heads == 0, "heads must divide width");
        let dh = d / spec.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut out = Matrix::zeros(qm.rows, d);
        let mut probs = Vec::new();
        for seg in &spec.segments {
            assert!(seg.q_start + seg.q_len <= qm.rows && seg.k_start + seg.k_len <= km.rows);
            assert!(seg.k_len >= 1, "attention segment without keys");
            for h in 0..spec.heads {
                let cs = h * dh;
                for i in 0..seg.q_len {
                    let qr = &qm.row(seg.q_start + i)[cs..cs + dh];
                    let visible = if spec.causal { (i + 1).min(seg.k_len) } else { seg.k_len };
                    let base = probs.len();
                    let mut mx = f64::NEG_INFINITY;
                    for j in 0..seg.k_len {
                        let s = if j < visible {
                            dot(qr, &km.row(seg.k_start + j)[cs..cs + dh]) * scale
                        } else {
                            f64::NEG_INFINITY
                        };
                        mx = mx.max(s);
                        probs.push(s);
                    }
                    let mut z = 0.0;
                    for p in &mut probs[base..] {
                        *p = if p.is_finite() { libm::exp(*p - mx) } else { 0.0 };
                        z += *p;
                    }
                    let orow = &mut out.data[(seg.q_start + i) * d + cs..(seg.q_start + i) * d + cs + dh];
                    for j in 0..seg.k_len {
                        let p = probs[base + j] / z;
                        probs[base + j] = p;
                        if p != 0.0 {
                            let vr = &vm.row(seg.k_start + j)[cs..cs + dh];
                            for (o, x) in orow.iter_mut().zip(vr) {
                                *o += p * x;
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, Op::Attention { q, k, v, spec, probs }, rg)
    }

    /// Diagonal selective state-space scan.
    ///
    /// `u`, `delta`: `L x D`; `a`: `D x N` (negative entries); `b`, `c`:
    /// `L x N`. For each channel `d` and state `n`:
    /// `h_t = exp(Δ_t A) h_{t-1} + B̄_t u_t`, `y_t = Σ_n C_t h_t`. With
    /// `reverse` the recurrence runs from the last position to the first.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        reverse: bool,
        disc: Discretization,
    ) -> Var {
        let (um, dm, am, bm, cm) =
            (self.value(u), self.value(delta), self.value(a), self.value(b), self.value(c));
        let (l, dd) = um.shape();
        let n = am.cols;
        assert_eq!(dm.shape(), (l, dd), "scan delta shape");
        assert_eq!(am.rows, dd, "scan A rows");
        assert_eq!(bm.shape(), (l, n), "scan B shape");
        assert_eq!(cm.shape(), (l, n), "scan C shape");
        let mut states = vec![0.0; l * dd * n];
        let mut h = vec![0.0; dd * n];
        let mut y = Matrix::zeros(l, dd);
        for step in 0..l {
            let t = if reverse { l - 1 - step } else { step };
            for ch in 0..dd {
                let dt = dm.get(t, ch);
                let ut = um.get(t, ch);
                let mut acc = 0.0;
                for s in 0..n {
                    let av = am.get(ch, s);
                    let ab = libm::exp(dt * av);
                    let coef = match disc {
                        Disc::Zoh => (ab - 1.0) / av,
                        Disc::Euler => dt,
                    };
                    let hv = ab * h[ch * n + s] + coef * bm.get(t, s) * ut;
                    h[ch * n + s] = hv;
                    acc += cm.get(t, s) * hv;
                }
                y.set(t, ch, acc);
            }
            states[t * dd * n..(t + 1) * dd * n].copy_from_slice(&h);
        }
        let rg = [u, delta, a, b, c].iter().any(|&x| self.rg(x));
        self.push(y, Op::SelectiveScan { u, delta, a, b, c, reverse, disc, states }, rg)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.shape(), targets.shape(), "bce target shape");
        let n = lm.len().max(1) as f64;
        let total: f64 = lm
            .data
            .iter()
            .zip(&targets.data)
            .map(|(&x, &t)| x.max(0.0) - x * t + libm::log1p(libm::exp(-x.abs())))
            .sum();
        let rg = self.rg(logits);
        self.push(Matrix::filled(1, 1, total / n), Op::BceWithLogits(logits, targets), rg)
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let lm = self.value(logits);
        assert_eq!(lm.rows, targets.len(), "cross-entropy target count");
        let probs = softmax_rows(lm);
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(t) = *t {
                let row = lm.row(r);
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + libm::log(row.iter().map(|x| libm::exp(x - mx)).sum::<f64>());
                total += lse - row[t];
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let rg = self.rg(logits);
        self.push(Matrix::filled(1, 1, loss), Op::SoftmaxCrossEntropy(logits, targets.to_vec(), probs), rg)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Gradients { grads, params }
    }

    fn accumulate(&self, grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            &Op::MatMul(a, b) => {
                if self.rg(a) {
                    let ga = g.matmul_nt(self.value(b));
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let gb = self.value(a).matmul_tn(g);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::MatMulNt(a, b) => {
                // C = A B^T: dA = dC B, dB = dC^T A
                if self.rg(a) {
                    let ga = g.matmul(self.value(b));
                    self.accumulate(grads, a, ga);
                }
                if self.rg(b) {
                    let gb = g.matmul_tn(self.value(a));
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Add(a, b, kind) => {
                self.accumulate(grads, a, g.clone());
                if self.rg(b) {
                    let gb = reduce_bcast(g, kind, self.value(b).shape());
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Sub(a, b, kind) => {
                self.accumulate(grads, a, g.clone());
                if self.rg(b) {
                    let gb = reduce_bcast(g, kind, self.value(b).shape()).scale(-1.0);
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Mul(a, b, kind) => {
                let (am, bm) = (self.value(a), self.value(b));
                let cols = am.cols;
                if self.rg(a) {
                    let data = g
                        .data
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| x * bm.data[bcast_index(kind, cols, i)])
                        .collect();
                    self.accumulate(grads, a, Matrix::from_vec(am.rows, am.cols, data));
                }
                if self.rg(b) {
                    let prod = g.zip_map(am, |x, y| x * y);
                    let gb = reduce_bcast(&prod, kind, bm.shape());
                    self.accumulate(grads, b, gb);
                }
            }
            &Op::Scale(a, s) => self.accumulate(grads, a, g.scale(s)),
            &Op::Unary(a, f) => {
                let x = self.value(a);
                let y = &node.value;
                let data = g
                    .data
                    .iter()
                    .zip(x.data.iter().zip(&y.data))
                    .map(|(&gi, (&xi, &yi))| gi * f.derivative(xi, yi))
                    .collect();
                self.accumulate(grads, a, Matrix::from_vec(x.rows, x.cols, data));
            }
            &Op::Transpose(a) => self.accumulate(grads, a, g.transpose()),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    if self.rg(p) {
                        let mut gp = Matrix::zeros(g.rows, w);
                        for r in 0..g.rows {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = self.value(p).shape();
                    if self.rg(p) {
                        let gp = Matrix::from_vec(r, c, g.data[off * c..(off + r) * c].to_vec());
                        self.accumulate(grads, p, gp);
                    }
                    off += r;
                }
            }
            &Op::SliceCols(a, start) => {
                let (r, c) = self.value(a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[start..start + g.cols].copy_from_slice(g.row(i));
                }
                self.accumulate(grads, a, ga);
            }
            Op::GatherRows(a, idx_list) => {
                let (r, c) = self.value(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (o, &i) in idx_list.iter().enumerate() {
                    for (d, s) in ga.row_mut(i).iter_mut().zip(g.row(o)) {
                        *d += s;
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            &Op::SumAll(a) => {
                let (r, c) = self.value(a).shape();
                self.accumulate(grads, a, Matrix::filled(r, c, g.data[0]));
            }
            &Op::SumRows(a) => {
                let (r, c) = self.value(a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).copy_from_slice(&g.data);
                }
                self.accumulate(grads, a, ga);
            }
            &Op::SumCols(a) => {
                let (r, c) = self.value(a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i).fill(g.data[i]);
                }
                self.accumulate(grads, a, ga);
            }
            &Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - s);
                    }
                }
                self.accumulate(grads, a, ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let n = y.cols as f64;
                let mut ga = Matrix::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let mg = gr.iter().sum::<f64>() / n;
                    let mgy = dot(gr, yr) / n;
                    for ((o, &yi), &gi) in ga.row_mut(r).iter_mut().zip(yr).zip(gr) {
                        *o = inv_std[r] * (gi - mg - yi * mgy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Attention { q, k, v, spec, probs } => {
                self.attention_backward(g, *q, *k, *v, spec, probs, grads);
            }
            Op::SelectiveScan { u, delta, a, b, c, reverse, disc, states } => {
                self.scan_backward(g, [*u, *delta, *a, *b, *c], *reverse, *disc, states, grads);
            }
            Op::BceWithLogits(logits, targets) => {
                let lm = self.value(*logits);
                let n = lm.len().max(1) as f64;
                let s = g.data[0] / n;
                let ga = lm.zip_map(targets, |x, t| s * (sigmoid(x) - t));
                self.accumulate(grads, *logits, ga);
            }
            Op::SoftmaxCrossEntropy(logits, targets, probs) => {
                let count = targets.iter().filter(|t| t.is_some()).count();
                let mut ga = Matrix::zeros(probs.rows, probs.cols);
                if count > 0 {
                    let s = g.data[0] / count as f64;
                    for (r, t) in targets.iter().enumerate() {
                        if let Some(t) = *t {
                            for (o, &p) in ga.row_mut(r).iter_mut().zip(probs.row(r)) {
                                *o = s * p;
                            }
                            ga.data[r * probs.cols + t] -= s;
                        }
                    }
                }
                self.accumulate(grads, *logits, ga);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Matrix,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        probs: &[f64],
        grads: &mut [Option<Matrix>],
    ) {
        let (qm, km, vm) = (self.value(q), self.value(k), self.value(v));
        let d = qm.cols;
        let dh = d / spec.heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let mut gq = Matrix::zeros(qm.rows, d);
        let mut gk = Matrix::zeros(km.rows, d);
        let mut gv = Matrix::zeros(vm.rows, d);
        let mut off = 0;
        let mut dp = Vec::new();
        for seg in &spec.segments {
            for h in 0..spec.heads {
                let cs = h * dh;
                for i in 0..seg.q_len {
                    let qi = seg.q_start + i;
                    let p = &probs[off..off + seg.k_len];
                    off += seg.k_len;
                    let go = &g.row(qi)[cs..cs + dh];
                    dp.clear();
                    for (j, &pj) in p.iter().enumerate() {
                        let kj = seg.k_start + j;
                        dp.push(dot(go, &vm.row(kj)[cs..cs + dh]));
                        if pj != 0.0 {
                            for (o, &x) in gv.row_mut(kj)[cs..cs + dh].iter_mut().zip(go) {
                                *o += pj * x;
                            }
                        }
                    }
                    let s = dot(p, &dp);
                    for (j, &pj) in p.iter().enumerate() {
                        if pj == 0.0 {
                            continue;
                        }
                        let kj = seg.k_start + j;
                        let ds = pj * (dp[j] - s) * scale;
                        for c in 0..dh {
                            gq.data[qi * d + cs + c] += ds * km.data[kj * d + cs + c];
                            gk.data[kj * d + cs + c] += ds * qm.data[qi * d + cs + c];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, gq);
        self.accumulate(grads, k, gk);
        self.accumulate(grads, v, gv);
    }

    fn scan_backward(
        &self,
        g: &Matrix,
        inputs: [Var; 5],
        reverse: bool,
        disc: Discretization,
        states: &[f64],
        grads: &mut [Option<Matrix>],
    ) {
        let [u, delta, a, b, c] = inputs;
        let (um, dm, am, bm, cm) =
            (self.value(u), self.value(delta), self.value(a), self.value(b), self.value(c));
        let (l, dd) = um.shape();
        let n = am.cols;
        let mut gu = Matrix::zeros(l, dd);
        let mut gd = Matrix::zeros(l, dd);
        let mut ga = Matrix::zeros(dd, n);
        let mut gb = Matrix::zeros(l, n);
        let mut gc = Matrix::zeros(l, n);
        let mut dh = vec![0.0; dd * n];
        for step in (0..l).rev() {
            let t = if reverse { l - 1 - step } else { step };
            let prev = if step == 0 {
                None
            } else {
                let tp = if reverse { t + 1 } else { t - 1 };
                Some(&states[tp * dd * n..(tp + 1) * dd * n])
            };
            let cur = &states[t * dd * n..(t + 1) * dd * n];
            for ch in 0..dd {
                let dy = g.get(t, ch);
                let dt = dm.get(t, ch);
                let ut = um.get(t, ch);
                for s in 0..n {
                    let i = ch * n + s;
                    let ct = cm.get(t, s);
                    let bt = bm.get(t, s);
                    gc.data[t * n + s] += dy * cur[i];
                    let dhi = dh[i] + dy * ct;
                    let av = am.get(ch, s);
                    let ab = libm::exp(dt * av);
                    let hp = prev.map_or(0.0, |p| p[i]);
                    let coef = match disc {
                        Disc::Zoh => (ab - 1.0) / av,
                        Disc::Euler => dt,
                    };
                    gu.data[t * dd + ch] += dhi * coef * bt;
                    gb.data[t * n + s] += dhi * coef * ut;
                    let dcoef = dhi * bt * ut;
                    let dab = dhi * hp;
                    let mut d_dt = dab * ab * av;
                    let mut d_a = dab * ab * dt;
                    match disc {
                        Disc::Zoh => {
                            d_dt += dcoef * ab;
                            d_a += dcoef * (dt * ab / av - (ab - 1.0) / (av * av));
                        }
                        Disc::Euler => d_dt += dcoef,
                    }
                    gd.data[t * dd + ch] += d_dt;
                    ga.data[i] += d_a;
                    dh[i] = dhi * ab;
                }
            }
        }
        self.accumulate(grads, u, gu);
        self.accumulate(grads, delta, gd);
        self.accumulate(grads, a, ga);
        self.accumulate(grads, b, gb);
        self.accumulate(grads, c, gc);
    }
}

use Discretization as Disc;

fn reduce_bcast(g: &Matrix, kind: Bcast, shape: (usize, usize)) -> Matrix {
    match kind {
        Bcast::Same => g.clone(),
        Bcast::Row => {
            let mut out = Matrix::zeros(1, shape.1);
            for r in 0..g.rows {
                for (o, x) in out.data.iter_mut().zip(g.row(r)) {
                    *o += x;
                }
            }
            out
        }
        Bcast::Col => {
            let data = (0..g.rows).map(|r| g.row(r).iter().sum()).collect();
            Matrix::from_vec(shape.0, 1, data)
        }
        Bcast::Scalar => Matrix::filled(1, 1, g.sum()),
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(m.rows, m.cols);
    for r in 0..m.rows {
        let row = m.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let o = out.row_mut(r);
        let mut z = 0.0;
        for (oi, &x) in o.iter_mut().zip(row) {
            *oi = libm::exp(x - mx);
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng::seeded;

    fn store_with(entries: &[(&str, Matrix)]) -> (ParamStore, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = entries.iter().map(|(n, m)| store.insert(n, m.clone())).collect();
        (store, ids)
    }

    #[test]
    fn elementwise_and_broadcast_gradients() {
        let mut rng = seeded(1, "ad-elementwise");
        let (store, ids) = store_with(&[
            ("a", Matrix::randn(3, 4, 1.0, &mut rng)),
            ("row", Matrix::randn(1, 4, 1.0, &mut rng)),
            ("col", Matrix::randn(3, 1, 1.0, &mut rng)),
            ("s", Matrix::randn(1, 1, 1.0, &mut rng)),
        ]);
        let report = check_gradients(&store, 1e-6, |tape, store| {
            let a = tape.param(store, ids[0]);
            let r = tape.param(store, ids[1]);
            let c = tape.param(store, ids[2]);
            let s = tape.param(store, ids[3]);
            let x = tape.add(a, r);
            let x = tape.mul(x, c);
            let x = tape.sub(x, s);
            let x = tape.unary(x, Unary::Tanh);
            let y = tape.silu(x);
            let y = tape.softplus(y);
            let t = tape.transpose(y);
            let z = tape.matmul(y, t);
            let z = tape.softmax_rows(z);
            let z = tape.square(z);
            tape.sum_all(z)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn structural_ops_gradients() {
        let mut rng = seeded(2, "ad-structural");
        let (store, ids) = store_with(&[
            ("a", Matrix::randn(3, 2, 1.0, &mut rng)),
            ("b", Matrix::randn(3, 3, 1.0, &mut rng)),
        ]);
        let report = check_gradients(&store, 1e-6, |tape, store| {
            let a = tape.param(store, ids[0]);
            let b = tape.param(store, ids[1]);
            let cat = tape.concat_cols(&[a, b]);
            let rows = tape.concat_rows(&[cat, cat]);
            let g = tape.gather_rows(rows, &[5, 0, 0, 2]);
            let sl = tape.slice_cols(g, 1, 3);
            let ln = tape.layer_norm(sl, 1e-5);
            let nt = tape.matmul_nt(ln, b);
            let sr = tape.sum_rows(nt);
            let sc = tape.sum_cols(nt);
            let sq = tape.square(sc);
            let e = tape.exp(sr);
            let x = tape.sum_all(e);
            let y = tape.mean_all(sq);
            let z = tape.add(x, y);
            let w = tape.sigmoid(z);
            let w = tape.scale(w, 3.0);
            tape.unary(w, Unary::Relu)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn attention_gradients_causal_and_cross() {
        let mut rng = seeded(3, "ad-attention");
        let (store, ids) = store_with(&[
            ("q", Matrix::randn(5, 4, 1.0, &mut rng)),
            ("k", Matrix::randn(6, 4, 1.0, &mut rng)),
            ("v", Matrix::randn(6, 4, 1.0, &mut rng)),
            ("w", Matrix::randn(5, 4, 1.0, &mut rng)),
        ]);
        for causal in [false, true] {
            let spec = Rc::new(AttentionSpec {
                heads: 2,
                segments: vec![
                    Segment { q_start: 0, q_len: 2, k_start: 0, k_len: 3 },
                    Segment { q_start: 2, q_len: 3, k_start: 3, k_len: 3 },
                ],
                causal,
            });
            let report = check_gradients(&store, 1e-6, |tape, store| {
                let q = tape.param(store, ids[0]);
                let k = tape.param(store, ids[1]);
                let v = tape.param(store, ids[2]);
                let w = tape.param(store, ids[3]);
                let o = tape.attention(q, k, v, spec.clone());
                let o = tape.mul(o, w);
                tape.sum_all(o)
            });
            assert!(report.max_rel_error < 1e-6, "causal={causal}: {report:?}");
        }
    }

    #[test]
    fn causal_attention_ignores_future_keys() {
        let mut rng = seeded(4, "ad-causal");
        let q = Matrix::randn(3, 2, 1.0, &mut rng);
        let k = Matrix::randn(3, 2, 1.0, &mut rng);
        let v = Matrix::randn(3, 2, 1.0, &mut rng);
        let spec = Rc::new(AttentionSpec {
            heads: 1,
            segments: vec![Segment { q_start: 0, q_len: 3, k_start: 0, k_len: 3 }],
            causal: true,
        });
        let mut tape = Tape::new();
        let (qv, kv, vv) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let out1 = tape.attention(qv, kv, vv, spec.clone());
        let mut v2 = v.clone();
        v2.set(2, 0, 100.0);
        let vv2 = tape.constant(v2);
        let out2 = tape.attention(qv, kv, vv2, spec);
        assert_eq!(tape.value(out1).row(0), tape.value(out2).row(0));
        assert_eq!(tape.value(out1).row(1), tape.value(out2).row(1));
        assert_eq!(tape.value(out1).row(0), v.row(0));
    }

    #[test]
    fn selective_scan_gradients_both_discretizations() {
        let mut rng = seeded(5, "ad-scan");
        let a_neg = Matrix::randn(3, 2, 0.5, &mut rng).map(|x| -(0.5 + x.abs()));
        let (store, ids) = store_with(&[
            ("u", Matrix::randn(4, 3, 1.0, &mut rng)),
            ("d", Matrix::randn(4, 3, 0.3, &mut rng).map(|x| 0.1 + x.abs())),
            ("a", a_neg),
            ("b", Matrix::randn(4, 2, 1.0, &mut rng)),
            ("c", Matrix::randn(4, 2, 1.0, &mut rng)),
            ("w", Matrix::randn(4, 3, 1.0, &mut rng)),
        ]);
        for disc in [Discretization::Zoh, Discretization::Euler] {
            for reverse in [false, true] {
                let report = check_gradients(&store, 1e-6, |tape, store| {
                    let v: Vec<Var> = ids.iter().map(|&id| tape.param(store, id)).collect();
                    let y = tape.selective_scan(v[0], v[1], v[2], v[3], v[4], reverse, disc);
                    let y = tape.mul(y, v[5]);
                    tape.sum_all(y)
                });
                assert!(report.max_rel_error < 1e-6, "{disc:?} reverse={reverse}: {report:?}");
            }
        }
    }

    #[test]
    fn loss_gradients() {
        let mut rng = seeded(6, "ad-loss");
        let (store, ids) = store_with(&[("x", Matrix::randn(4, 5, 2.0, &mut rng))]);
        let targets = Matrix::from_vec(4, 5, (0..20).map(|i| (i % 3 == 0) as u8 as f64).collect());
        let report = check_gradients(&store, 1e-6, |tape, store| {
            let x = tape.param(store, ids[0]);
            let a = tape.bce_with_logits(x, targets.clone());
            let b = tape.softmax_cross_entropy(x, &[Some(1), None, Some(4), Some(0)]);
            tape.add(a, b)
        });
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn cross_entropy_ignores_masked_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0], vec![50.0, -3.0]]));
        let l1 = tape.softmax_cross_entropy(x, &[Some(1), None]);
        let y = tape.constant(Matrix::from_rows(&[vec![1.0, 2.0]]));
        let l2 = tape.softmax_cross_entropy(y, &[Some(1)]);
        assert_eq!(tape.scalar(l1), tape.scalar(l2));
    }
}
