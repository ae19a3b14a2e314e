//! Autoregressive formula generation: a transformer encoder over the
//! symptom set, a cross-attention integration layer over herb tokens
//! initialised from the unified herb table, two decoder layers, and greedy
//! or beam decoding terminated by EOS.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_rows, AttentionSpec, Tape, Var};
use crate::data::Prescription;
use crate::error::{Error, Result};
use crate::nn::{cross_segments, self_segments, sinusoidal_positions, DecoderLayer, EncoderLayer, LayerNorm, Linear, MultiHeadAttention};
use crate::params::{ParamId, ParamStore};
use crate::recsys::canonical_symptoms;
use crate::refine::UnifiedEmbeddings;
use crate::tensor::Matrix;
use crate::train::{fit, TrainConfig};

/// Herb tokens `0..H` followed by BOS, EOS and PAD.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenVocab {
    pub n_herb: usize,
}

impl TokenVocab {
    pub fn bos(&self) -> usize {
        self.n_herb
    }

    pub fn eos(&self) -> usize {
        self.n_herb + 1
    }

    pub fn pad(&self) -> usize {
        self.n_herb + 2
    }

    pub fn size(&self) -> usize {
        self.n_herb + 3
    }

    pub fn is_herb(&self, t: usize) -> bool {
        t < self.n_herb
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeqConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub ff_hidden: usize,
    pub max_len: usize,
    /// `1` is greedy decoding.
    pub beam_width: usize,
    pub freeze_embeddings: bool,
}

impl Default for SeqConfig {
    fn default() -> Self {
        Self { encoder_layers: 2, decoder_layers: 2, heads: 4, ff_hidden: 128, max_len: 20, beam_width: 1, freeze_embeddings: false }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct DecodeOptions {
    /// Never emit EOS (generation runs to `max_len`).
    pub suppress_eos: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqModel {
    pub cfg: SeqConfig,
    pub vocab: TokenVocab,
    pub d: usize,
    pub n_sym: usize,
    pub sym_table: ParamId,
    /// Herb token embeddings, initialised from the unified herb table.
    pub herb_table: ParamId,
    /// BOS, EOS, PAD embeddings.
    pub special: ParamId,
    pub encoder: Vec<EncoderLayer>,
    pub enc_ln: LayerNorm,
    pub integrate_ln: LayerNorm,
    pub integrate: MultiHeadAttention,
    pub decoder: Vec<DecoderLayer>,
    pub dec_ln: LayerNorm,
    pub out: Linear,
}

pub const SEQ_PREFIX: &str = "seq.";
pub const SEQ_EMB_PREFIX: &str = "seq_emb.";

impl SeqModel {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, cfg: &SeqConfig, emb: &UnifiedEmbeddings) -> Self {
        let d = emb.sym.cols;
        let vocab = TokenVocab { n_herb: emb.herb.rows };
        let scale = emb.herb.norm() / libm::sqrt(emb.herb.len().max(1) as f64);
        Self {
            cfg: cfg.clone(),
            vocab,
            d,
            n_sym: emb.sym.rows,
            sym_table: store.insert("seq_emb.sym", emb.sym.clone()),
            herb_table: store.insert("seq_emb.herb", emb.herb.clone()),
            special: store.insert("seq.special", Matrix::randn(3, d, scale.max(0.1), rng)),
            encoder: (0..cfg.encoder_layers)
                .map(|l| EncoderLayer::new(store, rng, &format!("seq.enc{l}"), d, cfg.heads, cfg.ff_hidden))
                .collect(),
            enc_ln: LayerNorm::new(store, "seq.enc_ln", d),
            integrate_ln: LayerNorm::new(store, "seq.integrate_ln", d),
            integrate: MultiHeadAttention::new(store, rng, "seq.integrate", d, cfg.heads),
            decoder: (0..cfg.decoder_layers)
                .map(|l| DecoderLayer::new(store, rng, &format!("seq.dec{l}"), d, cfg.heads, cfg.ff_hidden))
                .collect(),
            dec_ln: LayerNorm::new(store, "seq.dec_ln", d),
            out: Linear::new(store, rng, "seq.out", d, vocab.size(), true),
        }
    }

    pub fn trainable_prefixes(&self) -> Vec<&'static str> {
        if self.cfg.freeze_embeddings {
            vec![SEQ_PREFIX]
        } else {
            vec![SEQ_PREFIX, SEQ_EMB_PREFIX]
        }
    }

    /// Encoder memory for canonical symptom sets, stacked (`Σ|set| x d`).
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, sym: Var, sets: &[&[usize]]) -> Var {
        let ids: Vec<usize> = sets.iter().flat_map(|s| s.iter().copied()).collect();
        let x = tape.gather_rows(sym, &ids);
        let max_len = sets.iter().map(|s| s.len()).max().unwrap_or(0);
        let table = sinusoidal_positions(max_len, self.d);
        let pos: Vec<usize> = sets.iter().flat_map(|s| 0..s.len()).collect();
        let pos = tape.constant(table.gather_rows(&pos));
        let mut h = tape.add(x, pos);
        let lens: Vec<usize> = sets.iter().map(|s| s.len()).collect();
        let spec = Rc::new(AttentionSpec { heads: self.cfg.heads, segments: self_segments(&lens), causal: false });
        for layer in &self.encoder {
            h = layer.forward(tape, store, h, spec.clone());
        }
        self.enc_ln.forward(tape, store, h)
    }

    /// Next-token logits at every input position (`Σ|input| x V`).
    pub fn decode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        herb: Var,
        memory: Var,
        mem_lens: &[usize],
        inputs: &[Vec<usize>],
    ) -> Var {
        let special = tape.param(store, self.special);
        let table = tape.concat_rows(&[herb, special]);
        let toks: Vec<usize> = inputs.iter().flat_map(|s| s.iter().copied()).collect();
        let x = tape.gather_rows(table, &toks);
        let max_len = inputs.iter().map(Vec::len).max().unwrap_or(0);
        let ptab = sinusoidal_positions(max_len, self.d);
        let pos: Vec<usize> = inputs.iter().flat_map(|s| 0..s.len()).collect();
        let pos = tape.constant(ptab.gather_rows(&pos));
        let x = tape.add(x, pos);
        let lens: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let cross = Rc::new(AttentionSpec { heads: self.cfg.heads, segments: cross_segments(&lens, mem_lens), causal: false });
        let selfs = Rc::new(AttentionSpec { heads: self.cfg.heads, segments: self_segments(&lens), causal: true });
        let hq = self.integrate_ln.forward(tape, store, x);
        let a = self.integrate.forward(tape, store, hq, memory, cross.clone());
        let mut h = tape.add(x, a);
        for layer in &self.decoder {
            h = layer.forward(tape, store, h, memory, selfs.clone(), cross.clone());
        }
        let h = self.dec_ln.forward(tape, store, h);
        self.out.forward(tape, store, h)
    }

    /// Teacher-forced inputs `[BOS, h1..hn]` and targets `[h1..hn, EOS]`,
    /// optionally right-padded with PAD inputs whose targets are masked.
    pub fn teacher_forcing(&self, herbs: &[usize], pad_to: Option<usize>) -> (Vec<usize>, Vec<Option<usize>>) {
        let mut input = vec![self.vocab.bos()];
        input.extend_from_slice(herbs);
        let mut target: Vec<Option<usize>> = herbs.iter().map(|&h| Some(h)).collect();
        target.push(Some(self.vocab.eos()));
        if let Some(n) = pad_to {
            while input.len() < n {
                input.push(self.vocab.pad());
                target.push(None);
            }
        }
        (input, target)
    }

    /// Mean token cross-entropy of a batch.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sym: Var,
        herb: Var,
        batch: &[&Prescription],
        pad_to: Option<usize>,
    ) -> Var {
        let sets: Vec<&[usize]> = batch.iter().map(|p| p.symptoms.as_slice()).collect();
        let memory = self.encode(tape, store, sym, &sets);
        let mem_lens: Vec<usize> = sets.iter().map(|s| s.len()).collect();
        let (inputs, targets): (Vec<_>, Vec<_>) = batch.iter().map(|p| self.teacher_forcing(&p.herbs, pad_to)).unzip();
        let logits = self.decode(tape, store, herb, memory, &mem_lens, &inputs);
        let flat: Vec<Option<usize>> = targets.into_iter().flatten().collect();
        tape.softmax_cross_entropy(logits, &flat)
    }

    fn mask_logits(&self, row: &mut [f64], emitted: &[usize], opts: DecodeOptions) {
        row[self.vocab.bos()] = f64::NEG_INFINITY;
        row[self.vocab.pad()] = f64::NEG_INFINITY;
        if opts.suppress_eos {
            row[self.vocab.eos()] = f64::NEG_INFINITY;
        }
        for &h in emitted {
            row[h] = f64::NEG_INFINITY;
        }
    }

    /// Step logits for the last position of each prefix.
    fn step_logits(&self, store: &ParamStore, sets: &[Vec<usize>], prefixes: &[Vec<usize>]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let sym = tape.constant(store.get(self.sym_table).clone());
        let herb = tape.constant(store.get(self.herb_table).clone());
        let refs: Vec<&[usize]> = sets.iter().map(Vec::as_slice).collect();
        let memory = self.encode(&mut tape, store, sym, &refs);
        let mem_lens: Vec<usize> = sets.iter().map(Vec::len).collect();
        let logits = self.decode(&mut tape, store, herb, memory, &mem_lens, prefixes);
        let mut last = Vec::with_capacity(prefixes.len());
        let mut off = 0;
        for p in prefixes {
            off += p.len();
            last.push(off - 1);
        }
        let out = tape.value(logits).gather_rows(&last);
        if !out.is_finite() {
            return Err(Error::Numeric("non-finite decoder logits".into()));
        }
        Ok(out)
    }

    /// Greedy decoding of several symptom sets at once.
    pub fn generate_batch(
        &self,
        store: &ParamStore,
        sets: &[Vec<usize>],
        max_len: usize,
        opts: DecodeOptions,
    ) -> Result<Vec<Vec<usize>>> {
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be >= 1".into()));
        }
        let canon: Vec<Vec<usize>> = sets.iter().map(|s| canonical_symptoms(s, self.n_sym)).collect::<Result<_>>()?;
        let max_len = max_len.min(self.vocab.n_herb);
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); canon.len()];
        let mut active: Vec<usize> = (0..canon.len()).collect();
        for _ in 0..max_len {
            if active.is_empty() {
                break;
            }
            let s: Vec<Vec<usize>> = active.iter().map(|&i| canon[i].clone()).collect();
            let p: Vec<Vec<usize>> = active
                .iter()
                .map(|&i| {
                    let mut v = vec![self.vocab.bos()];
                    v.extend_from_slice(&out[i]);
                    v
                })
                .collect();
            let logits = self.step_logits(store, &s, &p)?;
            let mut still = Vec::new();
            for (r, &i) in active.iter().enumerate() {
                let mut row = logits.row(r).to_vec();
                self.mask_logits(&mut row, &out[i], opts);
                let best = argmax(&row);
                if best == self.vocab.eos() {
                    continue;
                }
                out[i].push(best);
                still.push(i);
            }
            active = still;
        }
        Ok(out)
    }

    /// Beam search for one symptom set; ranks finished hypotheses by total
    /// log-probability.
    pub fn beam_search(
        &self,
        store: &ParamStore,
        symptoms: &[usize],
        max_len: usize,
        width: usize,
        opts: DecodeOptions,
    ) -> Result<Vec<usize>> {
        let set = canonical_symptoms(symptoms, self.n_sym)?;
        let max_len = max_len.min(self.vocab.n_herb);
        let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for _ in 0..max_len {
            if beams.is_empty() {
                break;
            }
            let sets = vec![set.clone(); beams.len()];
            let prefixes: Vec<Vec<usize>> = beams
                .iter()
                .map(|(b, _)| {
                    let mut v = vec![self.vocab.bos()];
                    v.extend_from_slice(b);
                    v
                })
                .collect();
            let mut logits = self.step_logits(store, &sets, &prefixes)?;
            for (r, (b, _)) in beams.iter().enumerate() {
                self.mask_logits(logits.row_mut(r), b, opts);
            }
            let probs = softmax_rows(&logits);
            let mut cands: Vec<(Vec<usize>, f64, bool)> = Vec::new();
            for (r, (b, lp)) in beams.iter().enumerate() {
                for t in 0..self.vocab.size() {
                    let p = probs.get(r, t);
                    if p > 0.0 {
                        let mut nb = b.clone();
                        let done = t == self.vocab.eos();
                        if !done {
                            nb.push(t);
                        }
                        cands.push((nb, lp + libm::log(p), done));
                    }
                }
            }
            cands.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
            beams.clear();
            for (seq, lp, done) in cands.into_iter().take(width.max(1)) {
                if done {
                    finished.push((seq, lp));
                } else {
                    beams.push((seq, lp));
                }
            }
        }
        finished.extend(beams);
        finished.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Ok(finished.into_iter().next().map(|(s, _)| s).unwrap_or_default())
    }

    /// Decodes one symptom set with the configured beam width.
    pub fn generate(&self, store: &ParamStore, symptoms: &[usize], max_len: usize, opts: DecodeOptions) -> Result<Vec<usize>> {
        if self.cfg.beam_width > 1 {
            self.beam_search(store, symptoms, max_len, self.cfg.beam_width, opts)
        } else {
            Ok(self.generate_batch(store, &[symptoms.to_vec()], max_len, opts)?.remove(0))
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced training; returns per-epoch mean token cross-entropy.
pub fn train_seq(store: &mut ParamStore, model: &SeqModel, train: &[&Prescription], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::InsufficientData("empty training split".into()));
    }
    let prefixes = model.trainable_prefixes();
    fit(store, &prefixes, cfg, train.len(), "seq.train", |tape, store, batch| {
        let items: Vec<&Prescription> = batch.iter().map(|&i| train[i]).collect();
        let sym = tape.param(store, model.sym_table);
        let herb = tape.param(store, model.herb_table);
        Ok(model.loss(tape, store, sym, herb, &items, None))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::rng::seeded;

    fn toy() -> (ParamStore, SeqModel) {
        let mut rng = seeded(3, "seq");
        let emb = UnifiedEmbeddings { sym: Matrix::randn(4, 4, 1.0, &mut rng), herb: Matrix::randn(6, 4, 1.0, &mut rng) };
        let cfg = SeqConfig { heads: 2, ff_hidden: 6, ..SeqConfig::default() };
        let mut store = ParamStore::new();
        let m = SeqModel::new(&mut store, &mut rng, &cfg, &emb);
        (store, m)
    }

    #[test]
    fn vocab_reserves_tokens_past_the_herbs() {
        let v = TokenVocab { n_herb: 5 };
        assert_eq!((v.bos(), v.eos(), v.pad(), v.size()), (5, 6, 7, 8));
        assert!(v.is_herb(4) && !v.is_herb(5));
    }

    #[test]
    fn herb_token_table_starts_as_the_unified_table() {
        let mut rng = seeded(3, "seq");
        let emb = UnifiedEmbeddings { sym: Matrix::randn(4, 4, 1.0, &mut rng), herb: Matrix::randn(6, 4, 1.0, &mut rng) };
        let (store, m) = toy();
        assert_eq!(store.get(m.herb_table), &emb.herb);
    }

    #[test]
    fn encoding_shape_and_canonical_order() {
        let (store, m) = toy();
        let mut tape = Tape::new();
        let sym = tape.constant(store.get(m.sym_table).clone());
        let a = m.encode(&mut tape, &store, sym, &[&[2]]);
        assert_eq!(tape.shape(a), (1, 4));
        let c1 = canonical_symptoms(&[3, 1, 2], 4).unwrap();
        let c2 = canonical_symptoms(&[2, 3, 1, 3], 4).unwrap();
        assert_eq!(c1, c2);
        let g1 = m.generate(&store, &[3, 1, 2], 4, DecodeOptions::default()).unwrap();
        let g2 = m.generate(&store, &[1, 2, 3], 4, DecodeOptions::default()).unwrap();
        assert_eq!(g1, g2);
    }

    #[test]
    fn forced_eos_gives_an_empty_formula() {
        let (mut store, m) = toy();
        let mut b = Matrix::zeros(1, m.vocab.size());
        b.data[m.vocab.eos()] = 1e6;
        *store.get_mut(m.out.b.unwrap()) = b;
        assert!(m.generate(&store, &[0], 5, DecodeOptions::default()).unwrap().is_empty());
    }

    #[test]
    fn suppressed_eos_fills_max_len_with_distinct_herbs() {
        let (mut store, m) = toy();
        // make every step prefer herb 0, BOS and PAD
        let mut b = Matrix::zeros(1, m.vocab.size());
        b.data[0] = 50.0;
        b.data[m.vocab.bos()] = 100.0;
        b.data[m.vocab.pad()] = 100.0;
        *store.get_mut(m.out.b.unwrap()) = b;
        let g = m.generate(&store, &[1, 2], 3, DecodeOptions { suppress_eos: true }).unwrap();
        assert_eq!(g.len(), 3);
        assert_eq!(g[0], 0);
        let mut u = g.clone();
        u.sort_unstable();
        u.dedup();
        assert_eq!(u.len(), 3);
        assert!(g.iter().all(|&t| m.vocab.is_herb(t)));
        let beam = m.beam_search(&store, &[1, 2], 3, 3, DecodeOptions { suppress_eos: true }).unwrap();
        assert_eq!(beam.len(), 3);
    }

    #[test]
    fn logits_do_not_see_future_tokens() {
        let (store, m) = toy();
        let mut tape = Tape::new();
        let sym = tape.constant(store.get(m.sym_table).clone());
        let herb = tape.constant(store.get(m.herb_table).clone());
        let mem = m.encode(&mut tape, &store, sym, &[&[0, 2]]);
        let a = m.decode(&mut tape, &store, herb, mem, &[2], &[vec![6, 1, 2, 3]]);
        let b = m.decode(&mut tape, &store, herb, mem, &[2], &[vec![6, 1, 4, 5]]);
        let (a, b) = (tape.value(a), tape.value(b));
        assert_eq!(a.row(0), b.row(0));
        assert_eq!(a.row(1), b.row(1));
        assert_ne!(a.row(2), b.row(2));
    }

    #[test]
    fn padding_leaves_the_loss_unchanged() {
        let (store, m) = toy();
        let ps = [Prescription::new(&[0, 1], &[2, 4, 1]), Prescription::new(&[3], &[5])];
        let refs: Vec<&Prescription> = ps.iter().collect();
        let mut tape = Tape::new();
        let sym = tape.constant(store.get(m.sym_table).clone());
        let herb = tape.constant(store.get(m.herb_table).clone());
        let a = m.loss(&mut tape, &store, sym, herb, &refs, None);
        let b = m.loss(&mut tape, &store, sym, herb, &refs, Some(7));
        assert_eq!(tape.scalar(a), tape.scalar(b));
    }

    #[test]
    fn seq_loss_gradients() {
        let (store, m) = toy();
        let ps = [Prescription::new(&[0, 1], &[2, 4]), Prescription::new(&[3], &[5, 0, 1])];
        let refs: Vec<&Prescription> = ps.iter().collect();
        let report = check_gradients(&store, 1e-6, |tape, store| {
            let sym = tape.param(store, m.sym_table);
            let herb = tape.param(store, m.herb_table);
            m.loss(tape, store, sym, herb, &refs, None)
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn training_lowers_loss_and_zero_epochs_is_a_no_op() {
        let (store0, m) = toy();
        let ps = [Prescription::new(&[0, 1], &[2, 4]), Prescription::new(&[3], &[5, 0, 1])];
        let refs: Vec<&Prescription> = ps.iter().collect();
        let mut store = store0.clone();
        let hist = train_seq(&mut store, &m, &refs, &TrainConfig { epochs: 100, ..TrainConfig::default() }).unwrap();
        assert!(hist.last().unwrap() < &hist[0]);
        assert_eq!(m.generate(&store, &[0, 1], 6, DecodeOptions::default()).unwrap(), vec![2, 4]);
        let mut same = store0.clone();
        train_seq(&mut same, &m, &refs, &TrainConfig::default().with_epochs(0)).unwrap();
        assert_eq!(same, store0);
        assert!(train_seq(&mut same, &m, &[], &TrainConfig::default()).is_err());
    }
}
