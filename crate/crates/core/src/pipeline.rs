//! End-to-end wiring: graph pretraining, molecular integration, feature
//! refinement and the two recommendation heads, each stage with its own
//! random stream so that switching a stage off leaves the others untouched.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::{build_graph, Corpus, HeteroGraph, Prescription};
use crate::error::{ensure_finite, Error, Result};
use crate::hgre::{hgre_forward_tape, link_loss, sample_negatives, HgreConfig, HgreParams, PreparedGraph};
use crate::mlfie::{train_vae, MlfieConfig, MlfieParams, MoleculeSet, Vae};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::recsys::{RecommendationResult, RsConfig, RsModel, RS_PREFIX};
use crate::refine::{compress, symptom_text, train_autoencoder, Autoencoder, FeatureLayout, Refiner, UnifiedEmbeddings, UNIFIED_DIM};
use crate::rng::seeded;
use crate::seqgen::{DecodeOptions, SeqConfig, SeqModel, SEQ_PREFIX};
use crate::tensor::Matrix;
use crate::train::{fit, TrainConfig};

/// Which optional stages run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub hgre: bool,
    pub mlfie: bool,
    pub gelram: bool,
    pub fr: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { hgre: true, mlfie: true, gelram: true, fr: true }
    }
}

impl Ablation {
    /// The module combinations compared in the ablation table, plus the
    /// full model without refinement.
    pub const PRESETS: [(&'static str, Ablation); 4] = [
        ("base", Ablation { hgre: true, mlfie: false, gelram: false, fr: true }),
        ("mlfie", Ablation { hgre: true, mlfie: true, gelram: false, fr: true }),
        ("full", Ablation { hgre: true, mlfie: true, gelram: true, fr: true }),
        ("no_fr", Ablation { hgre: true, mlfie: true, gelram: true, fr: false }),
    ];

    pub fn preset(name: &str) -> Option<Self> {
        Self::PRESETS.iter().find(|(n, _)| *n == name).map(|(_, a)| *a)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    /// Pretrain every stage on its own objective, then fit the head on
    /// copies of the unified tables.
    #[default]
    Staged,
    /// After pretraining, back-propagate the head loss through refinement
    /// and the molecular gate.
    Joint,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stages {
    pub link: TrainConfig,
    pub probe: TrainConfig,
    pub vae: TrainConfig,
    pub fr: TrainConfig,
    pub rs: TrainConfig,
    pub seq: TrainConfig,
}

impl Default for Stages {
    fn default() -> Self {
        let t = |epochs, lr| TrainConfig { epochs, lr, ..TrainConfig::default() };
        let head = |epochs| TrainConfig { batch_size: 32, ..t(epochs, 3e-3) };
        Self { link: t(100, 1e-2), probe: t(200, 1e-2), vae: t(400, 3e-3), fr: t(400, 3e-3), rs: head(500), seq: head(300) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub p_dim: usize,
    pub tau_s: usize,
    pub tau_h: usize,
    /// Width of symptom text vectors when the corpus has none.
    pub d_text: usize,
    pub fr_hidden: usize,
    pub hgre: HgreConfig,
    pub mlfie: MlfieConfig,
    pub rs: RsConfig,
    pub seq: SeqConfig,
    pub ablation: Ablation,
    pub mode: TrainMode,
    pub stages: Stages,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            p_dim: 23,
            tau_s: 2,
            tau_h: 2,
            d_text: 16,
            fr_hidden: 128,
            hgre: HgreConfig { d: 64, ..HgreConfig::default() },
            mlfie: MlfieConfig::default(),
            rs: RsConfig::default(),
            seq: SeqConfig::default(),
            ablation: Ablation::default(),
            mode: TrainMode::Staged,
            stages: Stages::default(),
        }
    }
}

impl PipelineConfig {
    fn stage(&self, t: &TrainConfig) -> TrainConfig {
        TrainConfig { seed: self.seed, ..t.clone() }
    }
}

/// Reconstruction error of one refinement autoencoder before and after
/// training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrReport {
    pub sym_init: f64,
    pub sym_final: f64,
    pub herb_init: f64,
    pub herb_final: f64,
}

impl FrReport {
    /// Combined MSE over all assembled entries.
    pub fn combined(&self, n_sym_entries: usize, n_herb_entries: usize) -> (f64, f64) {
        let (a, b) = (n_sym_entries as f64, n_herb_entries as f64);
        ((self.sym_init * a + self.herb_init * b) / (a + b), (self.sym_final * a + self.herb_final * b) / (a + b))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub link: Vec<f64>,
    pub probe: Vec<f64>,
    pub vae: Vec<f64>,
    pub fr: Option<FrReport>,
}

/// Every parameter of a run with the structures that read them.
#[derive(Clone, Debug, PartialEq)]
pub struct Fmash {
    pub cfg: PipelineConfig,
    pub store: ParamStore,
    pub graph: HeteroGraph,
    pub prepared: PreparedGraph,
    pub layout: FeatureLayout,
    /// `H x P`.
    pub props: Matrix,
    /// `S x d_text`.
    pub text: Matrix,
    pub mols: MoleculeSet,
    pub x0: ParamId,
    pub hgre: HgreParams,
    pub mlfie: MlfieParams,
    pub vae: Vae,
    pub refine_sym: Refiner,
    pub refine_herb: Refiner,
    pub rs: RsModel,
    pub seq: SeqModel,
}

const JOINT_PREFIXES: [&str; 5] = ["mlfie.gate", "mlfie.latent", "mlfie.attn", "fr.", "proj."];

impl Fmash {
    /// Builds every parameter at its initial value. The graph is built from
    /// `train` only.
    pub fn new(cfg: &PipelineConfig, corpus: &Corpus, train: &[&Prescription]) -> Result<Self> {
        corpus.validate(cfg.p_dim)?;
        let (n_sym, n_herb) = (corpus.n_sym(), corpus.n_herb());
        let owned: Vec<Prescription> = train.iter().map(|p| (*p).clone()).collect();
        let graph = build_graph(n_sym, n_herb, &owned, cfg.tau_s, cfg.tau_h)?;
        let prepared = PreparedGraph::new(&graph, cfg.hgre.sort)?;
        let d = cfg.hgre.d;
        let mut store = ParamStore::new();

        let x0 = store.insert("hgre.x0", Matrix::randn(n_sym + n_herb, d, 1.0, &mut seeded(cfg.seed, "hgre.x0")));
        let hgre = HgreParams::new(&mut store, &mut seeded(cfg.seed, "hgre.init"), "hgre", &cfg.hgre);

        let props = Matrix::from_rows(&corpus.herbs.iter().map(|h| h.properties.clone()).collect::<Vec<_>>());
        let mols = MoleculeSet::from_herbs(&corpus.herbs, cfg.mlfie.d_m)?;
        let mlfie = MlfieParams::new(&mut store, &mut seeded(cfg.seed, "mlfie.init"), "mlfie", &cfg.mlfie, cfg.p_dim, n_herb);
        let m = &cfg.mlfie;
        let vae = Vae::new(&mut store, &mut seeded(cfg.seed, "vae.init"), "vae", cfg.p_dim, m.vae_hidden, m.d_z, m.d_m);

        let d_text = corpus.symptoms.iter().find_map(|s| s.text_embedding.as_ref().map(Vec::len)).unwrap_or(cfg.d_text);
        let fallback = Matrix::randn(n_sym, d_text, 1.0, &mut seeded(cfg.seed, "text.fallback"));
        let text = symptom_text(&corpus.symptoms, &fallback)?;

        let layout = FeatureLayout { d_graph: d, d_m: if cfg.ablation.mlfie { m.d_m } else { 0 }, p_dim: cfg.p_dim, d_text };
        let mut rng = seeded(cfg.seed, "fr.init");
        let (refine_sym, refine_herb) = if cfg.ablation.fr {
            (
                Refiner::Autoencoder(Autoencoder::new(&mut store, &mut rng, "fr.sym", layout.sym_dim(), cfg.fr_hidden)),
                Refiner::Autoencoder(Autoencoder::new(&mut store, &mut rng, "fr.herb", layout.herb_dim(), cfg.fr_hidden)),
            )
        } else {
            (
                Refiner::Projection(Linear::new(&mut store, &mut rng, "proj.sym", layout.sym_dim(), UNIFIED_DIM, true)),
                Refiner::Projection(Linear::new(&mut store, &mut rng, "proj.herb", layout.herb_dim(), UNIFIED_DIM, true)),
            )
        };

        let blank = UnifiedEmbeddings { sym: Matrix::zeros(n_sym, UNIFIED_DIM), herb: Matrix::zeros(n_herb, UNIFIED_DIM) };
        let rs_cfg = RsConfig { gelram: cfg.ablation.gelram, ..cfg.rs.clone() };
        let mut rs = RsModel::new(&mut store, &mut seeded(cfg.seed, "rs.init"), &rs_cfg, &blank);
        rs.set_frequencies(train);
        let seq = SeqModel::new(&mut store, &mut seeded(cfg.seed, "seq.init"), &cfg.seq, &blank);

        Ok(Self {
            cfg: cfg.clone(),
            store,
            graph,
            prepared,
            layout,
            props,
            text,
            mols,
            x0,
            hgre,
            mlfie,
            vae,
            refine_sym,
            refine_herb,
            rs,
            seq,
        })
    }

    fn graph_features_tape(&self, tape: &mut Tape, store: &ParamStore) -> Var {
        let x = tape.param(store, self.x0);
        if self.cfg.ablation.hgre {
            hgre_forward_tape(tape, store, &self.hgre, &self.prepared, x)
        } else {
            x
        }
    }

    /// Node embeddings after the graph stage (`(S + H) x d`).
    pub fn graph_features(&self) -> Result<Matrix> {
        let mut tape = Tape::new();
        let g = self.graph_features_tape(&mut tape, &self.store);
        let g = tape.value(g).clone();
        ensure_finite(&g, "graph features")?;
        Ok(g)
    }

    /// Link-reconstruction pretraining of the initial features and HGRE.
    pub fn pretrain_graph(&mut self) -> Result<Vec<f64>> {
        if !self.cfg.ablation.hgre {
            return Ok(Vec::new());
        }
        let pos = self.graph.global_edges();
        if pos.is_empty() {
            log::warn!("graph has no edges; skipping link pretraining");
            return Ok(Vec::new());
        }
        let known: BTreeSet<(usize, usize)> = pos.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect();
        let n = self.graph.n_nodes();
        let mut neg_rng = seeded(self.cfg.seed, "hgre.neg");
        let cfg = self.cfg.stage(&self.cfg.stages.link);
        let this = &*self;
        let mut store = this.store.clone();
        let hist = fit(&mut store, &["hgre."], &cfg, 1, "hgre.link", |tape, store, _| {
            let emb = this.graph_features_tape(tape, store);
            let neg = sample_negatives(n, &known, pos.len(), &mut neg_rng);
            Ok(link_loss(tape, emb, &pos, &neg))
        })?;
        self.store = store;
        Ok(hist)
    }

    /// Pooled attention vectors of herbs that have molecules.
    pub fn pooled_complete(&self) -> Matrix {
        let complete = self.mols.complete();
        if complete.is_empty() {
            return Matrix::zeros(0, self.cfg.mlfie.d_m);
        }
        let mut tape = Tape::new();
        let p = tape.constant(self.props.gather_rows(&complete));
        let (v, _) = self.mlfie.attn.forward(&mut tape, &self.store, p, &self.mols, &complete);
        tape.value(v).clone()
    }

    /// Probe pretraining of the attention, then the VAE on complete herbs.
    pub fn pretrain_molecular(&mut self) -> Result<(Vec<f64>, Vec<f64>)> {
        if !self.cfg.ablation.mlfie {
            return Ok((Vec::new(), Vec::new()));
        }
        let complete = self.mols.complete();
        let probe_cfg = self.cfg.stage(&self.cfg.stages.probe);
        let mut store = self.store.clone();
        let this = &*self;
        let probe = fit(&mut store, &["mlfie.attn", "mlfie.probe"], &probe_cfg, complete.len(), "mlfie.probe", |tape, store, batch| {
            let herbs: Vec<usize> = batch.iter().map(|&i| complete[i]).collect();
            Ok(this.mlfie.probe_loss(tape, store, &this.props, &this.mols, &herbs))
        })?;
        self.store = store;
        let targets = self.pooled_complete();
        let vae_cfg = self.cfg.stage(&self.cfg.stages.vae);
        let vae = self.vae.clone();
        let hist = train_vae(&mut self.store, &vae, &self.props.gather_rows(&complete), &targets, &vae_cfg, self.cfg.mlfie.beta, "vae.")?;
        Ok((probe, hist))
    }

    /// VAE completions for herbs without molecules; other rows are zero.
    pub fn imputed(&self) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.props.rows, self.cfg.mlfie.d_m);
        let missing = self.mols.missing();
        if missing.is_empty() {
            return Ok(out);
        }
        let mut rng = seeded(self.cfg.seed, "mlfie.impute");
        let v = self.vae.impute(&self.store, &self.props.gather_rows(&missing), self.cfg.mlfie.impute_mode, &mut rng)?;
        for (i, &h) in missing.iter().enumerate() {
            out.row_mut(h).copy_from_slice(v.row(i));
        }
        Ok(out)
    }

    /// Assembled herb and symptom rows as tape nodes.
    fn assembled_tape(&self, tape: &mut Tape, store: &ParamStore, graph: &Matrix, imputed: &Matrix) -> (Var, Var) {
        let (s, h) = (self.graph.n_sym, self.graph.n_herb);
        let gs = tape.constant(graph.gather_rows(&(0..s).collect::<Vec<_>>()));
        let gh = tape.constant(graph.gather_rows(&(s..s + h).collect::<Vec<_>>()));
        let text = tape.constant(self.text.clone());
        let props = tape.constant(self.props.clone());
        let sym = tape.concat_cols(&[gs, text]);
        let herb = if self.cfg.ablation.mlfie {
            let m = self.mlfie.forward(tape, store, &self.props, &self.mols, imputed);
            tape.concat_cols(&[gh, m, props])
        } else {
            tape.concat_cols(&[gh, props])
        };
        (sym, herb)
    }

    /// `(symptom rows, herb rows)` before refinement.
    pub fn assembled(&self) -> Result<(Matrix, Matrix)> {
        let g = self.graph_features()?;
        let imp = self.imputed()?;
        let mut tape = Tape::new();
        let (s, h) = self.assembled_tape(&mut tape, &self.store, &g, &imp);
        let (s, h) = (tape.value(s).clone(), tape.value(h).clone());
        if s.cols != self.layout.sym_dim() || h.cols != self.layout.herb_dim() {
            return Err(Error::Dimension("assembled rows do not match the layout".into()));
        }
        Ok((s, h))
    }

    /// Fits both refinement autoencoders; `None` when refinement is off.
    pub fn pretrain_refinement(&mut self) -> Result<Option<FrReport>> {
        let (Refiner::Autoencoder(a_sym), Refiner::Autoencoder(a_herb)) = (&self.refine_sym, &self.refine_herb) else {
            return Ok(None);
        };
        let (a_sym, a_herb) = (a_sym.clone(), a_herb.clone());
        let (sym, herb) = self.assembled()?;
        let cfg = self.cfg.stage(&self.cfg.stages.fr);
        let sym_init = a_sym.reconstruction_mse(&self.store, &sym);
        let herb_init = a_herb.reconstruction_mse(&self.store, &herb);
        train_autoencoder(&mut self.store, &a_sym, &sym, &cfg, "fr.sym")?;
        train_autoencoder(&mut self.store, &a_herb, &herb, &cfg, "fr.herb")?;
        Ok(Some(FrReport {
            sym_init,
            sym_final: a_sym.reconstruction_mse(&self.store, &sym),
            herb_init,
            herb_final: a_herb.reconstruction_mse(&self.store, &herb),
        }))
    }

    /// Graph, molecular and refinement stages in order.
    pub fn pretrain(&mut self) -> Result<PretrainReport> {
        let link = self.pretrain_graph()?;
        let (probe, vae) = self.pretrain_molecular()?;
        let fr = self.pretrain_refinement()?;
        Ok(PretrainReport { link, probe, vae, fr })
    }

    /// Unified 64-d tables from the current parameters.
    pub fn unified(&self) -> Result<UnifiedEmbeddings> {
        let (sym, herb) = self.assembled()?;
        Ok(UnifiedEmbeddings { sym: compress(&sym, &self.refine_sym, &self.store)?, herb: compress(&herb, &self.refine_herb, &self.store)? })
    }


    /// Fits `head` (`"rs"` or `"seq"`) with its loss built by `loss`.
    fn train_head<F>(&mut self, train: &[&Prescription], head: &str, tables: (ParamId, ParamId), mut loss: F) -> Result<Vec<f64>>
    where
        F: FnMut(&Self, &mut Tape, &ParamStore, Var, Var, &[&Prescription]) -> Var,
    {
        if train.is_empty() {
            return Err(Error::InsufficientData("empty training split".into()));
        }
        let emb = self.unified()?;
        *self.store.get_mut(tables.0) = emb.sym;
        *self.store.get_mut(tables.1) = emb.herb;
        let (cfg_t, prefix, freeze) = match head {
            "rs" => (&self.cfg.stages.rs, RS_PREFIX, self.cfg.rs.freeze_embeddings),
            _ => (&self.cfg.stages.seq, SEQ_PREFIX, self.cfg.seq.freeze_embeddings),
        };
        let cfg = self.cfg.stage(cfg_t);
        let label = format!("{head}.train");
        let mut store = self.store.clone();
        let this = &*self;
        let hist = match self.cfg.mode {
            TrainMode::Staged => {
                let mut prefixes = vec![prefix];
                let emb_prefix = format!("{head}_emb.");
                if !freeze {
                    prefixes.push(&emb_prefix);
                }
                fit(&mut store, &prefixes, &cfg, train.len(), &label, |tape, store, batch| {
                    let items: Vec<&Prescription> = batch.iter().map(|&i| train[i]).collect();
                    let sym = tape.param(store, tables.0);
                    let herb = tape.param(store, tables.1);
                    Ok(loss(this, tape, store, sym, herb, &items))
                })?
            }
            TrainMode::Joint => {
                let graph = this.graph_features()?;
                let imputed = this.imputed()?;
                let mut prefixes = vec![prefix];
                prefixes.extend(JOINT_PREFIXES);
                fit(&mut store, &prefixes, &cfg, train.len(), &label, |tape, store, batch| {
                    let items: Vec<&Prescription> = batch.iter().map(|&i| train[i]).collect();
                    let (s, h) = this.assembled_tape(tape, store, &graph, &imputed);
                    let sym = this.refine_sym.compress_tape(tape, store, s);
                    let herb = this.refine_herb.compress_tape(tape, store, h);
                    Ok(loss(this, tape, store, sym, herb, &items))
                })?
            }
        };
        self.store = store;
        if self.cfg.mode == TrainMode::Joint {
            let emb = self.unified()?;
            *self.store.get_mut(tables.0) = emb.sym;
            *self.store.get_mut(tables.1) = emb.herb;
        }
        Ok(hist)
    }

    pub fn train_rs(&mut self, train: &[&Prescription]) -> Result<Vec<f64>> {
        let tables = (self.rs.sym_table, self.rs.herb_table);
        self.train_head(train, "rs", tables, |this, tape, store, sym, herb, items| this.rs.loss(tape, store, sym, herb, items))
    }

    pub fn train_seq(&mut self, train: &[&Prescription]) -> Result<Vec<f64>> {
        let tables = (self.seq.sym_table, self.seq.herb_table);
        self.train_head(train, "seq", tables, |this, tape, store, sym, herb, items| {
            this.seq.loss(tape, store, sym, herb, items, None)
        })
    }

    pub fn score(&self, sets: &[Vec<usize>]) -> Result<Vec<RecommendationResult>> {
        self.rs.score_batch(&self.store, sets)
    }

    /// Full herb rankings, one per symptom set.
    pub fn rank(&self, sets: &[Vec<usize>]) -> Result<Vec<Vec<usize>>> {
        Ok(self.score(sets)?.into_iter().map(|r| r.ranking).collect())
    }

    pub fn generate(&self, sets: &[Vec<usize>], opts: DecodeOptions) -> Result<Vec<Vec<usize>>> {
        let max_len = self.cfg.seq.max_len;
        if self.cfg.seq.beam_width > 1 {
            sets.iter().map(|s| self.seq.generate(&self.store, s, max_len, opts)).collect()
        } else {
            let mut out = Vec::with_capacity(sets.len());
            for chunk in sets.chunks(256) {
                out.extend(self.seq.generate_batch(&self.store, chunk, max_len, opts)?);
            }
            Ok(out)
        }
    }

    /// Replaces parameter values by name; every name of `other` must exist
    /// here with the same shape.
    pub fn load_values(&mut self, values: &[(String, Matrix)]) -> Result<()> {
        for (name, m) in values {
            let id = self.store.id(name).ok_or_else(|| Error::InvalidArgument(format!("unknown parameter '{name}'")))?;
            if self.store.get(id).shape() != m.shape() {
                return Err(Error::Dimension(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    m.shape(),
                    self.store.get(id).shape()
                )));
            }
            *self.store.get_mut(id) = m.clone();
        }
        if values.len() != self.store.len() {
            return Err(Error::InvalidArgument(format!("{} parameters supplied, {} expected", values.len(), self.store.len())));
        }
        Ok(())
    }
}
