//! Heterogeneous graph embedding: per-subgraph GCN followed by a
//! degree-ordered bidirectional selective scan, then a global GCN and scan
//! over the whole graph.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Discretization, Tape, Var};
use crate::data::HeteroGraph;
use crate::error::{ensure_finite, Error, Result};
use crate::nn::{Activation, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SortOrder {
    #[default]
    Descending,
    Ascending,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HgreConfig {
    /// Node feature width.
    pub d: usize,
    pub d_state: usize,
    /// State width of the global block.
    pub global_d_state: usize,
    pub gcn_layers: usize,
    pub activation: Activation,
    pub discretization: Discretization,
    pub sort: SortOrder,
}

impl Default for HgreConfig {
    fn default() -> Self {
        Self {
            d: 32,
            d_state: 16,
            global_d_state: 32,
            gcn_layers: 1,
            activation: Activation::Relu,
            discretization: Discretization::Zoh,
            sort: SortOrder::Descending,
        }
    }
}

/// `D^-1/2 (A + I) D^-1/2` for an undirected edge list over `n` nodes.
pub fn normalized_adjacency(n: usize, edges: &[(usize, usize)]) -> Result<Matrix> {
    let mut a = Matrix::identity(n);
    for &(u, v) in edges {
        if u >= n || v >= n {
            return Err(Error::Dimension(format!("edge ({u}, {v}) outside {n} nodes")));
        }
        if u != v {
            a.set(u, v, 1.0);
            a.set(v, u, 1.0);
        }
    }
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / libm::sqrt(a.row(i).iter().sum::<f64>())).collect();
    for i in 0..n {
        for j in 0..n {
            let x = a.get(i, j);
            if x != 0.0 {
                a.set(i, j, x * inv_sqrt[i] * inv_sqrt[j]);
            }
        }
    }
    Ok(a)
}

/// A stack of graph convolution layers `act(Â X W + b)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gcn {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Gcn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        layers: usize,
        activation: Activation,
    ) -> Self {
        let layers = (0..layers.max(1)).map(|l| Linear::new(store, rng, &format!("{name}.{l}"), d, d, true)).collect();
        Self { layers, activation }
    }

    /// `adj` must hold a normalised adjacency matrix.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, adj: Var) -> Var {
        let mut h = x;
        for layer in &self.layers {
            let ax = tape.matmul(adj, h);
            let y = layer.forward(tape, store, ax);
            h = tape.unary(y, self.activation.unary());
        }
        h
    }
}

/// One graph convolution evaluated off-tape.
pub fn gcn_forward(x: &Matrix, edges: &[(usize, usize)], gcn: &Gcn, store: &ParamStore) -> Result<Matrix> {
    if let Some(l) = gcn.layers.first() {
        if l.d_in != x.cols {
            return Err(Error::Dimension(format!("GCN expects {} input columns, got {}", l.d_in, x.cols)));
        }
    }
    let adj = normalized_adjacency(x.rows, edges)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let av = tape.constant(adj);
    let out = gcn.forward(&mut tape, store, xv, av);
    let out = tape.value(out).clone();
    ensure_finite(&out, "GCN output")?;
    Ok(out)
}

/// Node order used to serialise a graph for the scan, and its inverse.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DegreePermutation {
    /// Node index at each sorted position.
    pub perm: Vec<usize>,
    pub inverse: Vec<usize>,
}

impl DegreePermutation {
    pub fn sort_rows(&self, m: &Matrix) -> Matrix {
        m.gather_rows(&self.perm)
    }

    pub fn unsort_rows(&self, m: &Matrix) -> Matrix {
        m.gather_rows(&self.inverse)
    }
}

/// Stable sort of node indices by degree (descending by default); ties keep
/// ascending node order.
pub fn degree_permutation(degrees: &[usize], order: SortOrder) -> DegreePermutation {
    let mut perm: Vec<usize> = (0..degrees.len()).collect();
    match order {
        SortOrder::Descending => perm.sort_by(|&a, &b| degrees[b].cmp(&degrees[a])),
        SortOrder::Ascending => perm.sort_by(|&a, &b| degrees[a].cmp(&degrees[b])),
    }
    let mut inverse = vec![0; perm.len()];
    for (pos, &node) in perm.iter().enumerate() {
        inverse[node] = pos;
    }
    DegreePermutation { perm, inverse }
}

/// Parameters of one scan direction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SsmParams {
    pub in_proj: Linear,
    pub gate: Linear,
    pub delta: Linear,
    pub b: Linear,
    pub c: Linear,
    /// `A = -exp(a_log)`, `d x d_state`.
    pub a_log: ParamId,
    pub discretization: Discretization,
}

impl SsmParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_state: usize,
        discretization: Discretization,
    ) -> Self {
        let in_proj = Linear::new(store, rng, &format!("{name}.in"), d, d, true);
        let gate = Linear::new(store, rng, &format!("{name}.gate"), d, d, true);
        let delta = Linear::new(store, rng, &format!("{name}.delta"), d, d, true);
        let b = Linear::new(store, rng, &format!("{name}.b"), d, d_state, false);
        let c = Linear::new(store, rng, &format!("{name}.c"), d, d_state, false);
        let mut a = Matrix::zeros(d, d_state);
        for ch in 0..d {
            for s in 0..d_state {
                a.set(ch, s, libm::log((s + 1) as f64));
            }
        }
        let a_log = store.insert(&format!("{name}.a_log"), a);
        Self { in_proj, gate, delta, b, c, a_log, discretization }
    }

    /// Gated selective scan of `x` (`L x d`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, direction: Direction) -> Var {
        let u = self.in_proj.forward(tape, store, x);
        let u = tape.silu(u);
        let g = self.gate.forward(tape, store, x);
        let g = tape.silu(g);
        let dt = self.delta.forward(tape, store, u);
        let dt = tape.softplus(dt);
        let b = self.b.forward(tape, store, u);
        let c = self.c.forward(tape, store, u);
        let a_log = tape.param(store, self.a_log);
        let a = tape.exp(a_log);
        let a = tape.scale(a, -1.0);
        let y = tape.selective_scan(u, dt, a, b, c, direction == Direction::Backward, self.discretization);
        tape.mul(y, g)
    }
}

/// Scan of `seq` in one direction, evaluated off-tape.
pub fn ssm_scan(seq: &Matrix, params: &SsmParams, store: &ParamStore, direction: Direction) -> Result<Matrix> {
    if seq.rows == 0 {
        return Err(Error::InvalidArgument("scan over an empty sequence".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let y = params.forward(&mut tape, store, x, direction);
    let y = tape.value(y).clone();
    ensure_finite(&y, "selective scan")?;
    Ok(y)
}

/// Forward and backward scans merged by a linear layer, plus a residual.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BidirBlock {
    pub forward: SsmParams,
    pub backward: SsmParams,
    pub merge: Linear,
}

impl BidirBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d: usize,
        d_state: usize,
        discretization: Discretization,
    ) -> Self {
        Self {
            forward: SsmParams::new(store, rng, &format!("{name}.fwd"), d, d_state, discretization),
            backward: SsmParams::new(store, rng, &format!("{name}.bwd"), d, d_state, discretization),
            merge: Linear::new(store, rng, &format!("{name}.merge"), 2 * d, d, true),
        }
    }

    pub fn forward_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let f = self.forward.forward(tape, store, x, Direction::Forward);
        let b = self.backward.forward(tape, store, x, Direction::Backward);
        let fb = tape.concat_cols(&[f, b]);
        let m = self.merge.forward(tape, store, fb);
        tape.add(x, m)
    }

    /// Zeroes the merge layer so the block reduces to its residual.
    pub fn make_identity(&self, store: &mut ParamStore) {
        zero(store, self.merge.w);
        if let Some(b) = self.merge.b {
            zero(store, b);
        }
    }
}

fn zero(store: &mut ParamStore, id: ParamId) {
    let m = store.get_mut(id);
    m.data.iter_mut().for_each(|x| *x = 0.0);
}

pub fn bidirectional_block(seq: &Matrix, block: &BidirBlock, store: &ParamStore) -> Result<Matrix> {
    if seq.rows == 0 {
        return Err(Error::InvalidArgument("scan over an empty sequence".into()));
    }
    let mut tape = Tape::new();
    let x = tape.constant(seq.clone());
    let y = block.forward_tape(&mut tape, store, x);
    let y = tape.value(y).clone();
    ensure_finite(&y, "bidirectional block")?;
    Ok(y)
}

/// `Unsort(Block(Sort(GCN(x))))` on tape.
pub fn subgraph_enhance_tape(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    adj: Var,
    perm: &DegreePermutation,
    gcn: &Gcn,
    block: &BidirBlock,
) -> Var {
    let h = gcn.forward(tape, store, x, adj);
    let sorted = tape.gather_rows(h, &perm.perm);
    let y = block.forward_tape(tape, store, sorted);
    tape.gather_rows(y, &perm.inverse)
}

pub fn subgraph_enhance(
    x: &Matrix,
    edges: &[(usize, usize)],
    degrees: &[usize],
    gcn: &Gcn,
    block: &BidirBlock,
    store: &ParamStore,
    order: SortOrder,
) -> Result<Matrix> {
    if degrees.len() != x.rows {
        return Err(Error::Dimension(format!("{} degrees for {} nodes", degrees.len(), x.rows)));
    }
    let adj = normalized_adjacency(x.rows, edges)?;
    let perm = degree_permutation(degrees, order);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let av = tape.constant(adj);
    let y = subgraph_enhance_tape(&mut tape, store, xv, av, &perm, gcn, block);
    let y = tape.value(y).clone();
    ensure_finite(&y, "subgraph enhancement")?;
    Ok(y)
}

/// All HGRE parameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HgreParams {
    pub gcn_sym: Gcn,
    pub gcn_herb: Gcn,
    pub gcn_global: Gcn,
    pub block_sym: BidirBlock,
    pub block_herb: BidirBlock,
    pub block_global: BidirBlock,
}

impl HgreParams {
    /// Registers parameters under `{name}.`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, cfg: &HgreConfig) -> Self {
        let (d, act, disc) = (cfg.d, cfg.activation, cfg.discretization);
        Self {
            gcn_sym: Gcn::new(store, rng, &format!("{name}.gcn_sym"), d, cfg.gcn_layers, act),
            block_sym: BidirBlock::new(store, rng, &format!("{name}.ssm_sym"), d, cfg.d_state, disc),
            gcn_herb: Gcn::new(store, rng, &format!("{name}.gcn_herb"), d, cfg.gcn_layers, act),
            block_herb: BidirBlock::new(store, rng, &format!("{name}.ssm_herb"), d, cfg.d_state, disc),
            gcn_global: Gcn::new(store, rng, &format!("{name}.gcn_global"), d, cfg.gcn_layers, act),
            block_global: BidirBlock::new(store, rng, &format!("{name}.ssm_global"), d, cfg.global_d_state, disc),
        }
    }
}

/// Normalised adjacencies and degree orders derived once per graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedGraph {
    pub n_sym: usize,
    pub n_herb: usize,
    pub adj_sym: Matrix,
    pub adj_herb: Matrix,
    pub adj_global: Matrix,
    pub perm_sym: DegreePermutation,
    pub perm_herb: DegreePermutation,
    pub perm_global: DegreePermutation,
}

impl PreparedGraph {
    pub fn new(graph: &HeteroGraph, order: SortOrder) -> Result<Self> {
        Ok(Self {
            n_sym: graph.n_sym,
            n_herb: graph.n_herb,
            adj_sym: normalized_adjacency(graph.n_sym, &graph.edges_ss)?,
            adj_herb: normalized_adjacency(graph.n_herb, &graph.edges_hh)?,
            adj_global: normalized_adjacency(graph.n_nodes(), &graph.global_edges())?,
            perm_sym: degree_permutation(&graph.sub_degrees_ss, order),
            perm_herb: degree_permutation(&graph.sub_degrees_hh, order),
            perm_global: degree_permutation(&graph.degrees, order),
        })
    }
}

/// Full HGRE pass on tape; `x` holds symptom rows then herb rows.
pub fn hgre_forward_tape(tape: &mut Tape, store: &ParamStore, params: &HgreParams, g: &PreparedGraph, x: Var) -> Var {
    let xs = tape.slice_rows(x, 0, g.n_sym);
    let xh = tape.slice_rows(x, g.n_sym, g.n_herb);
    let a_s = tape.constant(g.adj_sym.clone());
    let a_h = tape.constant(g.adj_herb.clone());
    let a_g = tape.constant(g.adj_global.clone());
    let es = subgraph_enhance_tape(tape, store, xs, a_s, &g.perm_sym, &params.gcn_sym, &params.block_sym);
    let eh = subgraph_enhance_tape(tape, store, xh, a_h, &g.perm_herb, &params.gcn_herb, &params.block_herb);
    let xe = tape.concat_rows(&[es, eh]);
    subgraph_enhance_tape(tape, store, xe, a_g, &g.perm_global, &params.gcn_global, &params.block_global)
}

pub fn hgre_forward(
    x: &Matrix,
    graph: &HeteroGraph,
    params: &HgreParams,
    store: &ParamStore,
    order: SortOrder,
) -> Result<Matrix> {
    if x.rows != graph.n_nodes() || graph.n_sym == 0 || graph.n_herb == 0 {
        return Err(Error::Dimension(format!(
            "feature matrix has {} rows for {} symptoms + {} herbs",
            x.rows, graph.n_sym, graph.n_herb
        )));
    }
    let g = PreparedGraph::new(graph, order)?;
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let y = hgre_forward_tape(&mut tape, store, params, &g, xv);
    let y = tape.value(y).clone();
    ensure_finite(&y, "HGRE output")?;
    Ok(y)
}

/// Mean link-reconstruction BCE of dot-product scores: `pos` pairs are
/// labelled 1, `neg` pairs 0.
pub fn link_loss(tape: &mut Tape, emb: Var, pos: &[(usize, usize)], neg: &[(usize, usize)]) -> Var {
    let us: Vec<usize> = pos.iter().chain(neg).map(|e| e.0).collect();
    let vs: Vec<usize> = pos.iter().chain(neg).map(|e| e.1).collect();
    let a = tape.gather_rows(emb, &us);
    let b = tape.gather_rows(emb, &vs);
    let ab = tape.mul(a, b);
    let logits = tape.sum_cols(ab);
    let mut t = Matrix::zeros(us.len(), 1);
    for i in 0..pos.len() {
        t.data[i] = 1.0;
    }
    tape.bce_with_logits(logits, t)
}

/// Uniformly drawn node pairs that are not edges, as many as requested.
pub fn sample_negatives<R: Rng + ?Sized>(
    n: usize,
    edges: &alloc::collections::BTreeSet<(usize, usize)>,
    count: usize,
    rng: &mut R,
) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(count);
    if n < 2 {
        return out;
    }
    let mut tries = 0;
    while out.len() < count && tries < count * 50 {
        tries += 1;
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        let key = (a.min(b), a.max(b));
        if a != b && !edges.contains(&key) {
            out.push(key);
        }
    }
    out
}
