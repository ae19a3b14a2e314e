//! Ranked herb recommendation: a probability-weighted herb vector and the
//! summed symptom vector form a [CLS] token for a transformer encoder over
//! the symptom tokens; a per-herb sigmoid head scores every herb.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, softmax_rows, AttentionSpec, Tape, Var};
use crate::data::Prescription;
use crate::error::{Error, Result};
use crate::nn::{self_segments, EncoderLayer, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::refine::UnifiedEmbeddings;
use crate::tensor::{dot, Matrix};
use crate::train::{fit, TrainConfig};

/// Source of the first-pass herb probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BaseProbability {
    /// Softmax of herb-symptom inner products.
    #[default]
    Matcher,
    /// Herb frequency in the training prescriptions.
    Frequency,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RsConfig {
    pub d_enc: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub temperature: f64,
    /// `false` replaces the fusion encoder with inner-product scoring.
    pub gelram: bool,
    pub base_probability: BaseProbability,
    /// Keep the unified tables fixed during training.
    pub freeze_embeddings: bool,
}

impl Default for RsConfig {
    fn default() -> Self {
        Self {
            d_enc: 64,
            layers: 2,
            heads: 4,
            ff_hidden: 128,
            temperature: 1.0,
            gelram: true,
            base_probability: BaseProbability::Matcher,
            freeze_embeddings: false,
        }
    }
}

/// `softmax(herb_table · s / (√d · temperature))`.
pub fn base_probabilities(s: &[f64], herb_table: &Matrix, temperature: f64) -> Result<Vec<f64>> {
    if s.len() != herb_table.cols {
        return Err(Error::Dimension(format!("symptom vector of width {} vs herb table {}", s.len(), herb_table.cols)));
    }
    let scale = 1.0 / (libm::sqrt(s.len() as f64) * temperature);
    let logits = Matrix::row_vector((0..herb_table.rows).map(|h| dot(herb_table.row(h), s) * scale).collect());
    Ok(softmax_rows(&logits).data)
}

/// `Σ p_i h_i`.
pub fn weighted_herb(herb_table: &Matrix, p: &[f64]) -> Result<Vec<f64>> {
    if p.len() != herb_table.rows {
        return Err(Error::Dimension("probability count differs from herb count".into()));
    }
    if p.iter().any(|&x| x < 0.0) {
        return Err(Error::InvalidArgument("negative herb probability".into()));
    }
    if (p.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(Error::InvalidArgument("herb probabilities do not sum to 1".into()));
    }
    let mut out = vec![0.0; herb_table.cols];
    for (i, &pi) in p.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(herb_table.row(i)) {
            *o += pi * x;
        }
    }
    Ok(out)
}

/// Scores of every herb and the resulting ranking.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecommendationResult {
    pub scores: Vec<f64>,
    /// Herb ids by descending score, ties by ascending id.
    pub ranking: Vec<usize>,
}

impl RecommendationResult {
    pub fn from_scores(scores: Vec<f64>) -> Self {
        let mut ranking: Vec<usize> = (0..scores.len()).collect();
        ranking.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Self { scores, ranking }
    }

    /// The first `k` herbs with their scores.
    pub fn top_k(&self, k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.ranking.len() {
            return Err(Error::KOutOfRange { k, max: self.ranking.len() });
        }
        Ok(self.ranking[..k].iter().map(|&h| (h, self.scores[h])).collect())
    }
}

/// Canonical (sorted, de-duplicated) symptom ids, validated against `n_sym`.
pub fn canonical_symptoms(ids: &[usize], n_sym: usize) -> Result<Vec<usize>> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("empty symptom set".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&s| s >= n_sym) {
        return Err(Error::UnknownSymptom(bad));
    }
    let mut v = ids.to_vec();
    v.sort_unstable();
    v.dedup();
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RsModel {
    pub cfg: RsConfig,
    pub d: usize,
    pub n_sym: usize,
    pub n_herb: usize,
    /// Trainable copies of the unified tables.
    pub sym_table: ParamId,
    pub herb_table: ParamId,
    pub in_proj: Option<Linear>,
    pub tok_proj: Option<Linear>,
    pub layers: Vec<EncoderLayer>,
    pub ln_f: Option<LayerNorm>,
    pub out: Option<Linear>,
    /// Per-herb bias of the inner-product scorer.
    pub plain_bias: Option<ParamId>,
    /// Normalised training frequencies for [`BaseProbability::Frequency`].
    pub frequencies: Option<Vec<f64>>,
}

/// Parameter-name prefix of the head and of its embedding tables.
pub const RS_PREFIX: &str = "rs.";
pub const RS_EMB_PREFIX: &str = "rs_emb.";

impl RsModel {
    /// Registers the head, with tables initialised from `emb`.
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &RsConfig, emb: &UnifiedEmbeddings) -> Self {
        let d = emb.sym.cols;
        let sym_table = store.insert("rs_emb.sym", emb.sym.clone());
        let herb_table = store.insert("rs_emb.herb", emb.herb.clone());
        let n_herb = emb.herb.rows;
        let mut m = Self {
            cfg: cfg.clone(),
            d,
            n_sym: emb.sym.rows,
            n_herb,
            sym_table,
            herb_table,
            in_proj: None,
            tok_proj: None,
            layers: Vec::new(),
            ln_f: None,
            out: None,
            plain_bias: None,
            frequencies: None,
        };
        if cfg.gelram {
            let e = cfg.d_enc;
            m.in_proj = Some(Linear::new(store, rng, "rs.in_proj", 2 * d, e, true));
            m.tok_proj = Some(Linear::new(store, rng, "rs.tok_proj", d, e, true));
            m.layers = (0..cfg.layers)
                .map(|l| EncoderLayer::new(store, rng, &format!("rs.enc{l}"), e, cfg.heads, cfg.ff_hidden))
                .collect();
            m.ln_f = Some(LayerNorm::new(store, "rs.ln_f", e));
            m.out = Some(Linear::new(store, rng, "rs.out", e, n_herb, true));
        } else {
            m.plain_bias = Some(store.insert("rs.plain_bias", Matrix::zeros(1, n_herb)));
        }
        m
    }

    /// Uses herb frequencies of `train` as base probabilities.
    pub fn set_frequencies(&mut self, train: &[&Prescription]) {
        let mut f = vec![1.0; self.n_herb];
        for p in train {
            for &h in &p.herbs {
                f[h] += 1.0;
            }
        }
        let z: f64 = f.iter().sum();
        self.frequencies = Some(f.into_iter().map(|x| x / z).collect());
    }

    pub fn trainable_prefixes(&self) -> Vec<&'static str> {
        if self.cfg.freeze_embeddings {
            vec![RS_PREFIX]
        } else {
            vec![RS_PREFIX, RS_EMB_PREFIX]
        }
    }

    /// Score logits (`B x H`) for canonical symptom sets, given table nodes.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, sym: Var, herb: Var, sets: &[&[usize]]) -> Var {
        let b = sets.len();
        let mut agg = Matrix::zeros(b, self.n_sym);
        for (i, set) in sets.iter().enumerate() {
            for &s in *set {
                agg.set(i, s, 1.0);
            }
        }
        let agg = tape.constant(agg);
        let s = tape.matmul(agg, sym);
        if !self.cfg.gelram {
            let l = tape.matmul_nt(s, herb);
            let l = tape.scale(l, 1.0 / libm::sqrt(self.d as f64));
            let bias = tape.param(store, self.plain_bias.expect("inner-product bias"));
            return tape.add(l, bias);
        }
        let p = match (&self.frequencies, self.cfg.base_probability) {
            (Some(f), BaseProbability::Frequency) => {
                let mut m = Matrix::zeros(b, self.n_herb);
                for r in 0..b {
                    m.row_mut(r).copy_from_slice(f);
                }
                tape.constant(m)
            }
            _ => {
                let l = tape.matmul_nt(s, herb);
                let l = tape.scale(l, 1.0 / (libm::sqrt(self.d as f64) * self.cfg.temperature));
                tape.softmax_rows(l)
            }
        };
        let hw = tape.matmul(p, herb);
        let x = tape.concat_cols(&[hw, s]);
        let cls = self.in_proj.as_ref().expect("gelram").forward(tape, store, x);
        let ids: Vec<usize> = sets.iter().flat_map(|s| s.iter().copied()).collect();
        let toks = tape.gather_rows(sym, &ids);
        let toks = self.tok_proj.as_ref().expect("gelram").forward(tape, store, toks);
        let all = tape.concat_rows(&[cls, toks]);
        let mut order = Vec::with_capacity(b + ids.len());
        let mut cls_pos = Vec::with_capacity(b);
        let mut off = b;
        for (i, set) in sets.iter().enumerate() {
            cls_pos.push(order.len());
            order.push(i);
            order.extend(off..off + set.len());
            off += set.len();
        }
        let mut h = tape.gather_rows(all, &order);
        let lens: Vec<usize> = sets.iter().map(|s| s.len() + 1).collect();
        let spec = Rc::new(AttentionSpec { heads: self.cfg.heads, segments: self_segments(&lens), causal: false });
        for layer in &self.layers {
            h = layer.forward(tape, store, h, spec.clone());
        }
        let z = tape.gather_rows(h, &cls_pos);
        let z = self.ln_f.as_ref().expect("gelram").forward(tape, store, z);
        self.out.as_ref().expect("gelram").forward(tape, store, z)
    }

    /// Mean multi-label BCE over a batch of prescriptions.
    pub fn loss(&self, tape: &mut Tape, store: &ParamStore, sym: Var, herb: Var, batch: &[&Prescription]) -> Var {
        let sets: Vec<&[usize]> = batch.iter().map(|p| p.symptoms.as_slice()).collect();
        let logits = self.logits(tape, store, sym, herb, &sets);
        let mut t = Matrix::zeros(batch.len(), self.n_herb);
        for (i, p) in batch.iter().enumerate() {
            for &h in &p.herbs {
                t.set(i, h, 1.0);
            }
        }
        tape.bce_with_logits(logits, t)
    }

    /// Scores of several symptom sets using the stored tables.
    pub fn score_batch(&self, store: &ParamStore, sets: &[Vec<usize>]) -> Result<Vec<RecommendationResult>> {
        let canon: Vec<Vec<usize>> = sets.iter().map(|s| canonical_symptoms(s, self.n_sym)).collect::<Result<_>>()?;
        let mut out = Vec::with_capacity(sets.len());
        for chunk in canon.chunks(256) {
            let mut tape = Tape::new();
            let sym = tape.constant(store.get(self.sym_table).clone());
            let herb = tape.constant(store.get(self.herb_table).clone());
            let refs: Vec<&[usize]> = chunk.iter().map(Vec::as_slice).collect();
            let l = self.logits(&mut tape, store, sym, herb, &refs);
            let l = tape.value(l);
            if !l.is_finite() {
                return Err(Error::Numeric("non-finite recommendation scores".into()));
            }
            for r in 0..l.rows {
                out.push(RecommendationResult::from_scores(l.row(r).iter().map(|&x| sigmoid(x)).collect()));
            }
        }
        Ok(out)
    }

    pub fn gelram_score(&self, store: &ParamStore, symptoms: &[usize]) -> Result<RecommendationResult> {
        Ok(self.score_batch(store, &[symptoms.to_vec()])?.remove(0))
    }

    pub fn recommend(&self, store: &ParamStore, symptoms: &[usize], k: usize) -> Result<Vec<(usize, f64)>> {
        if k == 0 || k > self.n_herb {
            return Err(Error::KOutOfRange { k, max: self.n_herb });
        }
        self.gelram_score(store, symptoms)?.top_k(k)
    }
}

/// Trains the head (and, unless frozen, its tables) on `train`; returns
/// per-epoch losses.
pub fn train_rs(store: &mut ParamStore, model: &RsModel, train: &[&Prescription], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training split".into()));
    }
    let prefixes = model.trainable_prefixes();
    fit(store, &prefixes, cfg, train.len(), "rs.train", |tape, store, batch| {
        let items: Vec<&Prescription> = batch.iter().map(|&i| train[i]).collect();
        let sym = tape.param(store, model.sym_table);
        let herb = tape.param(store, model.herb_table);
        Ok(model.loss(tape, store, sym, herb, &items))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng::seeded;

    #[test]
    fn base_probabilities_cases() {
        let h = Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -2.0], vec![0.0, 3.0]]);
        let p = base_probabilities(&[1.0, 0.0], &h, 1.0).unwrap();
        assert!(p.iter().all(|x| (x - 1.0 / 3.0).abs() < 1e-15));
        let s = [0.6, 0.8];
        let h = Matrix::from_rows(&[vec![30.0, 40.0], vec![1.0, 0.0], vec![0.0, 1.0], vec![-1.0, 0.0]]);
        let p = base_probabilities(&s, &h, 1.0).unwrap();
        assert!(p[0] > 0.99);
        let mut rng = seeded(1, "bp");
        for _ in 0..100 {
            let h = Matrix::randn(7, 5, 2.0, &mut rng);
            let s: Vec<f64> = Matrix::randn(1, 5, 2.0, &mut rng).data;
            let p = base_probabilities(&s, &h, 1.0).unwrap();
            assert!(p.iter().all(|&x| x >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let hw = weighted_herb(&h, &p).unwrap();
            let bound = h.max_abs();
            assert!(hw.iter().all(|x| x.abs() <= bound + 1e-12));
        }
    }

    #[test]
    fn weighted_herb_cases() {
        let h = Matrix::from_rows(&[vec![4.0, 0.0], vec![0.0, 4.0]]);
        assert_eq!(weighted_herb(&h, &[0.25, 0.75]).unwrap(), vec![1.0, 3.0]);
        assert_eq!(weighted_herb(&h, &[0.5, 0.5]).unwrap(), vec![2.0, 2.0]);
        assert_eq!(weighted_herb(&h, &[0.0, 1.0]).unwrap(), vec![0.0, 4.0]);
        assert!(weighted_herb(&h, &[-0.5, 1.5]).is_err());
    }

    fn toy(gelram: bool) -> (ParamStore, RsModel) {
        let mut rng = seeded(2, "toy");
        let emb = UnifiedEmbeddings { sym: Matrix::randn(4, 4, 1.0, &mut rng), herb: Matrix::randn(5, 4, 1.0, &mut rng) };
        let cfg = RsConfig { d_enc: 4, heads: 2, ff_hidden: 6, gelram, ..RsConfig::default() };
        let mut store = ParamStore::new();
        let m = RsModel::new(&mut store, &mut rng, &cfg, &emb);
        (store, m)
    }

    #[test]
    fn scores_ignore_symptom_order_and_zero_head_is_flat() {
        let (mut store, m) = toy(true);
        let a = m.gelram_score(&store, &[0, 2, 3]).unwrap();
        let b = m.gelram_score(&store, &[3, 0, 2]).unwrap();
        assert_eq!(a, b);
        let out = m.out.unwrap();
        *store.get_mut(out.w) = Matrix::zeros(4, 5);
        let r = m.gelram_score(&store, &[1]).unwrap();
        assert!(r.scores.iter().all(|&s| s == 0.5));
        assert_eq!(r.ranking, vec![0, 1, 2, 3, 4]);
        assert!(matches!(m.gelram_score(&store, &[9]), Err(Error::UnknownSymptom(9))));
    }

    #[test]
    fn recommend_bounds_and_prefixes() {
        let (store, m) = toy(true);
        assert_eq!(m.recommend(&store, &[1, 2], 5).unwrap().len(), 5);
        assert!(matches!(m.recommend(&store, &[1, 2], 6), Err(Error::KOutOfRange { k: 6, max: 5 })));
        assert!(m.recommend(&store, &[1, 2], 0).is_err());
        let full = m.gelram_score(&store, &[1, 2]).unwrap();
        assert_eq!(m.recommend(&store, &[1, 2], 1).unwrap()[0].0, full.ranking[0]);
        for k in 1..5 {
            let a = m.recommend(&store, &[1, 2], k).unwrap();
            let b = m.recommend(&store, &[1, 2], k + 1).unwrap();
            assert_eq!(&b[..k], &a[..]);
        }
    }

    #[test]
    fn batched_scores_match_single_queries() {
        let (store, m) = toy(true);
        let sets = vec![vec![0], vec![1, 3], vec![0, 1, 2, 3]];
        let batch = m.score_batch(&store, &sets).unwrap();
        for (s, r) in sets.iter().zip(&batch) {
            let single = m.gelram_score(&store, s).unwrap();
            for (a, b) in single.scores.iter().zip(&r.scores) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rs_loss_gradients() {
        for gelram in [true, false] {
            let (store, m) = toy(gelram);
            let ps = [Prescription::new(&[0, 1], &[0, 2]), Prescription::new(&[3], &[4]), Prescription::new(&[1, 2, 3], &[1])];
            let refs: Vec<&Prescription> = ps.iter().collect();
            let report = check_gradients(&store, 1e-6, |tape, store| {
                let sym = tape.param(store, m.sym_table);
                let herb = tape.param(store, m.herb_table);
                m.loss(tape, store, sym, herb, &refs)
            });
            assert!(report.max_rel_error < 1e-4, "{report:?}");
        }
    }

    #[test]
    fn training_lowers_loss_and_all_positive_targets_saturate() {
        let (store0, m) = toy(true);
        let ps: Vec<Prescription> = (0..4).map(|s| Prescription::new(&[s], &[0, 1, 2, 3, 4])).collect();
        let refs: Vec<&Prescription> = ps.iter().collect();
        let mut store = store0.clone();
        let cfg = TrainConfig { epochs: 200, lr: 1e-2, ..TrainConfig::default() };
        let hist = train_rs(&mut store, &m, &refs, &cfg).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        assert!(crate::train::smoothed_non_increasing(&hist, 10, 1e-6));
        let r = m.gelram_score(&store, &[2]).unwrap();
        assert!(r.scores.iter().sum::<f64>() / 5.0 > 0.9);
        let mut same = store0.clone();
        train_rs(&mut same, &m, &refs, &cfg.clone().with_epochs(0)).unwrap();
        assert_eq!(same, store0);
        assert!(train_rs(&mut same, &m, &[], &cfg).is_err());
    }

    #[test]
    fn frozen_tables_stay_fixed() {
        let mut rng = seeded(2, "toy");
        let emb = UnifiedEmbeddings { sym: Matrix::randn(4, 4, 1.0, &mut rng), herb: Matrix::randn(5, 4, 1.0, &mut rng) };
        let cfg = RsConfig { d_enc: 4, heads: 2, ff_hidden: 6, freeze_embeddings: true, ..RsConfig::default() };
        let mut store = ParamStore::new();
        let m = RsModel::new(&mut store, &mut rng, &cfg, &emb);
        let ps = [Prescription::new(&[0], &[1])];
        let refs: Vec<&Prescription> = ps.iter().collect();
        train_rs(&mut store, &m, &refs, &TrainConfig::default().with_epochs(3)).unwrap();
        assert_eq!(store.get(m.sym_table), &emb.sym);
    }
}
