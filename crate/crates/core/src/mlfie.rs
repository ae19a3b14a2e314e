//! Molecular-level herb features: property-guided attention pooling over
//! molecule embeddings, gated fusion with a learnable per-herb embedding, and
//! a VAE that imputes the pooled vector from properties when a herb has no
//! molecules.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::HerbRecord;
use crate::error::{ensure_finite, Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::rng::{fnv1a, seeded};
use crate::tensor::Matrix;
use crate::train::{fit, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GateShape {
    #[default]
    Vector,
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ImputeMode {
    #[default]
    Mean,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlfieConfig {
    /// Molecule embedding width.
    pub d_m: usize,
    pub d_k: usize,
    pub gate: GateShape,
    pub d_z: usize,
    pub vae_hidden: usize,
    pub beta: f64,
    pub impute_mode: ImputeMode,
    pub latent_init_std: f64,
}

impl Default for MlfieConfig {
    fn default() -> Self {
        Self {
            d_m: 32,
            d_k: 16,
            gate: GateShape::Vector,
            d_z: 16,
            vae_hidden: 64,
            beta: 1.0,
            impute_mode: ImputeMode::Mean,
            latent_init_std: 0.02,
        }
    }
}

/// Deterministic stand-in for a learned molecule encoder: signed hashed
/// character 1- to 3-grams, normalised to unit length.
pub fn stub_encode_molecule(smiles: &str, d_m: usize) -> Result<Vec<f64>> {
    if smiles.is_empty() {
        return Err(Error::InvalidArgument("empty molecule string".into()));
    }
    if d_m == 0 {
        return Err(Error::InvalidArgument("d_m must be >= 1".into()));
    }
    let bytes = smiles.as_bytes();
    let mut v = vec![0.0; d_m];
    for n in 1..=3 {
        for gram in bytes.windows(n) {
            let mut key = Vec::with_capacity(n + 1);
            key.push(n as u8);
            key.extend_from_slice(gram);
            let h = fnv1a(&key);
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % d_m as u64) as usize] += sign;
        }
    }
    let norm = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>());
    if norm == 0.0 {
        // every gram cancelled out; fall back to a hashed one-hot
        v[(fnv1a(bytes) % d_m as u64) as usize] = 1.0;
        return Ok(v);
    }
    Ok(v.into_iter().map(|x| x / norm).collect())
}

/// Molecule embeddings of every herb stacked in herb order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoleculeSet {
    /// `M x d_m`.
    pub embeddings: Matrix,
    /// `(start, len)` rows of each herb.
    pub ranges: Vec<(usize, usize)>,
}

impl MoleculeSet {
    /// Uses precomputed embeddings where a herb has them, the stub encoder
    /// otherwise.
    pub fn from_herbs(herbs: &[HerbRecord], d_m: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut ranges = Vec::with_capacity(herbs.len());
        for h in herbs {
            let start = rows.len();
            match &h.mol_embeddings {
                Some(embs) if !embs.is_empty() => {
                    for e in embs {
                        if e.len() != d_m {
                            return Err(Error::schema(
                                format!("herb {} '{}'", h.id, h.name),
                                format!("molecule embedding of width {} (expected {d_m})", e.len()),
                            ));
                        }
                        rows.push(e.clone());
                    }
                }
                _ => {
                    for m in &h.molecules {
                        rows.push(stub_encode_molecule(m, d_m)?);
                    }
                }
            }
            ranges.push((start, rows.len() - start));
        }
        let embeddings = if rows.is_empty() { Matrix::zeros(0, d_m) } else { Matrix::from_rows(&rows) };
        Ok(Self { embeddings, ranges })
    }

    pub fn n_herb(&self) -> usize {
        self.ranges.len()
    }

    pub fn d_m(&self) -> usize {
        self.embeddings.cols
    }

    pub fn has_molecules(&self, herb: usize) -> bool {
        self.ranges[herb].1 > 0
    }

    pub fn complete(&self) -> Vec<usize> {
        (0..self.n_herb()).filter(|&h| self.has_molecules(h)).collect()
    }

    pub fn missing(&self) -> Vec<usize> {
        (0..self.n_herb()).filter(|&h| !self.has_molecules(h)).collect()
    }

    pub fn of(&self, herb: usize) -> Matrix {
        let (s, l) = self.ranges[herb];
        self.embeddings.gather_rows(&(s..s + l).collect::<Vec<_>>())
    }
}

/// Query and key projections of the property-guided attention.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionParams {
    /// `P x d_k`.
    pub w_q: ParamId,
    /// `d_m x d_k`.
    pub w_k: ParamId,
    pub d_k: usize,
}

impl AttentionParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        p_dim: usize,
        d_m: usize,
        d_k: usize,
    ) -> Self {
        let w_q = store.insert(&format!("{name}.w_q"), Matrix::randn(p_dim, d_k, 1.0 / libm::sqrt(p_dim as f64), rng));
        let w_k = store.insert(&format!("{name}.w_k"), Matrix::randn(d_m, d_k, 1.0 / libm::sqrt(d_m as f64), rng));
        Self { w_q, w_k, d_k }
    }

    /// Pooled vectors (`herbs.len() x d_m`) for herbs that all have
    /// molecules; `props` holds their property rows in the same order.
    /// Also returns the attention weight node (`herbs.len() x M'`).
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        props: Var,
        mols: &MoleculeSet,
        herbs: &[usize],
    ) -> (Var, Var) {
        let mut rows = Vec::new();
        let mut spans = Vec::with_capacity(herbs.len());
        for &h in herbs {
            let (s, l) = mols.ranges[h];
            assert!(l > 0, "herb {h} has no molecules");
            spans.push((rows.len(), l));
            rows.extend(s..s + l);
        }
        let e = tape.constant(mols.embeddings.gather_rows(&rows));
        let wq = tape.param(store, self.w_q);
        let wk = tape.param(store, self.w_k);
        let q = tape.matmul(props, wq);
        let k = tape.matmul(e, wk);
        let logits = tape.matmul_nt(q, k);
        let logits = tape.scale(logits, 1.0 / libm::sqrt(self.d_k as f64));
        let logits = if herbs.len() > 1 {
            let mut mask = Matrix::filled(herbs.len(), rows.len(), -1e30);
            for (i, &(s, l)) in spans.iter().enumerate() {
                mask.row_mut(i)[s..s + l].iter_mut().for_each(|x| *x = 0.0);
            }
            let mask = tape.constant(mask);
            tape.add(logits, mask)
        } else {
            logits
        };
        let alpha = tape.softmax_rows(logits);
        (tape.matmul(alpha, e), alpha)
    }
}

/// Pools one herb's molecule embeddings (`K x d_m`). Returns the pooled
/// vector and the attention weights.
pub fn aggregate_attention(
    mol_embs: &Matrix,
    p_h: &[f64],
    params: &AttentionParams,
    store: &ParamStore,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if mol_embs.rows == 0 {
        return Err(Error::InsufficientData("no molecules to aggregate; impute instead".into()));
    }
    if p_h.len() != store.get(params.w_q).rows || mol_embs.cols != store.get(params.w_k).rows {
        return Err(Error::Dimension("property or molecule width does not match the attention".into()));
    }
    let mols = MoleculeSet { embeddings: mol_embs.clone(), ranges: vec![(0, mol_embs.rows)] };
    let mut tape = Tape::new();
    let p = tape.constant(Matrix::row_vector(p_h.to_vec()));
    let (v, alpha) = params.forward(&mut tape, store, p, &mols, &[0]);
    Ok((tape.value(v).data.clone(), tape.value(alpha).data.clone()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateParams {
    pub lin: Linear,
}

impl GateParams {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d_m: usize, shape: GateShape) -> Self {
        let d_out = match shape {
            GateShape::Vector => d_m,
            GateShape::Scalar => 1,
        };
        Self { lin: Linear::new(store, rng, name, d_m, d_out, true) }
    }

    /// `λ ⊙ v + (1 - λ) ⊙ h_e` with `λ = sigmoid(v W_g + b_g)`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, v: Var, h_e: Var) -> Var {
        let z = self.lin.forward(tape, store, v);
        let lambda = tape.sigmoid(z);
        let diff = tape.sub(v, h_e);
        let gated = tape.mul(diff, lambda);
        tape.add(h_e, gated)
    }
}

pub fn fuse_gate(v_h: &[f64], h_e: &[f64], params: &GateParams, store: &ParamStore) -> Result<Vec<f64>> {
    if v_h.len() != h_e.len() || v_h.len() != params.lin.d_in {
        return Err(Error::Dimension(format!("gate inputs of width {} and {}", v_h.len(), h_e.len())));
    }
    let mut tape = Tape::new();
    let v = tape.constant(Matrix::row_vector(v_h.to_vec()));
    let h = tape.constant(Matrix::row_vector(h_e.to_vec()));
    let out = params.forward(&mut tape, store, v, h);
    Ok(tape.value(out).data.clone())
}

/// `0.5 Σ (μ² + σ² - 1 - ln σ²)`.
pub fn kl_divergence(mu: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mu.iter().zip(logvar).map(|(m, lv)| m * m + libm::exp(*lv) - 1.0 - lv).sum::<f64>()
}

/// Property-conditioned VAE over pooled molecule vectors.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vae {
    pub enc: [Linear; 2],
    pub mu: Linear,
    pub logvar: Linear,
    pub dec: [Linear; 2],
    pub out: Linear,
    pub p_dim: usize,
    pub d_z: usize,
    pub d_m: usize,
}

/// Tape nodes of one VAE loss evaluation (batch means).
#[derive(Clone, Copy, Debug)]
pub struct VaeLossVars {
    pub loss: Var,
    pub kl: Var,
    pub recon: Var,
}

impl Vae {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        p_dim: usize,
        hidden: usize,
        d_z: usize,
        d_m: usize,
    ) -> Self {
        let l = |store: &mut ParamStore, rng: &mut R, n: &str, a, b| Linear::new(store, rng, &format!("{name}.{n}"), a, b, true);
        Self {
            enc: [l(store, rng, "enc0", p_dim, hidden), l(store, rng, "enc1", hidden, hidden)],
            mu: l(store, rng, "mu", hidden, d_z),
            logvar: Linear::with_std(store, rng, &format!("{name}.logvar"), hidden, d_z, true, 0.01),
            dec: [l(store, rng, "dec0", d_z, hidden), l(store, rng, "dec1", hidden, hidden)],
            out: l(store, rng, "out", hidden, d_m),
            p_dim,
            d_z,
            d_m,
        }
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, p: Var) -> (Var, Var) {
        let mut h = p;
        for l in &self.enc {
            let y = l.forward(tape, store, h);
            h = tape.relu(y);
        }
        (self.mu.forward(tape, store, h), self.logvar.forward(tape, store, h))
    }

    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let mut h = z;
        for l in &self.dec {
            let y = l.forward(tape, store, h);
            h = tape.relu(y);
        }
        self.out.forward(tape, store, h)
    }

    /// Per-sample `recon + β KL`, averaged over rows. With `eps` the latent is
    /// sampled as `μ + σ ε`; without it `z = μ`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        p: Var,
        target: Var,
        eps: Option<Matrix>,
        beta: f64,
    ) -> VaeLossVars {
        let n = tape.shape(p).0.max(1) as f64;
        let (mu, lv) = self.encode(tape, store, p);
        let z = match eps {
            Some(e) => {
                let half = tape.scale(lv, 0.5);
                let sigma = tape.exp(half);
                let e = tape.constant(e);
                let noise = tape.mul(sigma, e);
                tape.add(mu, noise)
            }
            None => mu,
        };
        let out = self.decode(tape, store, z);
        let diff = tape.sub(out, target);
        let sq = tape.square(diff);
        let recon = tape.sum_all(sq);
        let recon = tape.scale(recon, 1.0 / n);
        let mu2 = tape.square(mu);
        let var = tape.exp(lv);
        let a = tape.add(mu2, var);
        let b = tape.sub(a, lv);
        let minus_one = tape.constant(Matrix::filled(1, 1, -1.0));
        let c = tape.add(b, minus_one);
        let kl = tape.sum_all(c);
        let kl = tape.scale(kl, 0.5 / n);
        let bkl = tape.scale(kl, beta);
        let loss = tape.add(recon, bkl);
        VaeLossVars { loss, kl, recon }
    }

    /// Encodes `p_h` and decodes either the mean or a sampled latent.
    pub fn impute<R: Rng + ?Sized>(&self, store: &ParamStore, p_h: &Matrix, mode: ImputeMode, rng: &mut R) -> Result<Matrix> {
        if p_h.cols != self.p_dim {
            return Err(Error::Dimension(format!("property vector of length {} (expected {})", p_h.cols, self.p_dim)));
        }
        let mut tape = Tape::new();
        let p = tape.constant(p_h.clone());
        let (mu, lv) = self.encode(&mut tape, store, p);
        let z = match mode {
            ImputeMode::Mean => mu,
            ImputeMode::Sample => {
                let (r, c) = tape.shape(mu);
                let e = tape.constant(Matrix::randn(r, c, 1.0, rng));
                let half = tape.scale(lv, 0.5);
                let s = tape.exp(half);
                let n = tape.mul(s, e);
                tape.add(mu, n)
            }
        };
        let out = self.decode(&mut tape, store, z);
        let out = tape.value(out).clone();
        ensure_finite(&out, "imputed molecular vector")?;
        Ok(out)
    }

    /// Per-row squared error of mean-mode reconstructions.
    pub fn reconstruction_errors(&self, store: &ParamStore, props: &Matrix, targets: &Matrix) -> Result<Vec<f64>> {
        let rec = self.impute(store, props, ImputeMode::Mean, &mut seeded(0, "unused"))?;
        Ok((0..rec.rows)
            .map(|r| rec.row(r).iter().zip(targets.row(r)).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect())
    }
}

/// `(loss, KL, recon)` for one complete pair. `sample_z` draws the latent
/// with the given generator; otherwise the mean is used.
pub fn vae_loss<R: Rng + ?Sized>(
    p_h: &[f64],
    v_target: &[f64],
    vae: &Vae,
    store: &ParamStore,
    beta: f64,
    sample_z: Option<&mut R>,
) -> Result<(f64, f64, f64)> {
    if p_h.len() != vae.p_dim || v_target.len() != vae.d_m {
        return Err(Error::Dimension("VAE input or target width".into()));
    }
    let mut tape = Tape::new();
    let p = tape.constant(Matrix::row_vector(p_h.to_vec()));
    let t = tape.constant(Matrix::row_vector(v_target.to_vec()));
    let eps = sample_z.map(|r| Matrix::randn(1, vae.d_z, 1.0, r));
    let l = vae.loss(&mut tape, store, p, t, eps, beta);
    let out = (tape.scalar(l.loss), tape.scalar(l.kl), tape.scalar(l.recon));
    if !out.0.is_finite() {
        return Err(Error::Numeric("VAE loss is not finite".into()));
    }
    Ok(out)
}

/// Fits the VAE on complete `(p_h, v_h)` rows; returns per-epoch losses.
pub fn train_vae(
    store: &mut ParamStore,
    vae: &Vae,
    props: &Matrix,
    targets: &Matrix,
    cfg: &TrainConfig,
    beta: f64,
    prefix: &str,
) -> Result<Vec<f64>> {
    if props.rows < 8 {
        return Err(Error::InsufficientData(format!("VAE needs at least 8 complete herbs, got {}", props.rows)));
    }
    if props.rows != targets.rows {
        return Err(Error::Dimension("VAE property and target row counts differ".into()));
    }
    let mut eps_rng = seeded(cfg.seed, "vae.eps");
    fit(store, &[prefix], cfg, props.rows, "vae", |tape, store, batch| {
        let p = tape.constant(props.gather_rows(batch));
        let t = tape.constant(targets.gather_rows(batch));
        let eps = Matrix::randn(batch.len(), vae.d_z, 1.0, &mut eps_rng);
        Ok(vae.loss(tape, store, p, t, Some(eps), beta).loss)
    })
}

pub fn impute_missing<R: Rng + ?Sized>(
    p_h: &[f64],
    vae: &Vae,
    store: &ParamStore,
    mode: ImputeMode,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(vae.impute(store, &Matrix::row_vector(p_h.to_vec()), mode, rng)?.data)
}

/// Attention, gate, latent table and the property probe used to pretrain
/// the attention.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlfieParams {
    pub attn: AttentionParams,
    pub gate: GateParams,
    /// `H x d_m` learnable per-herb embedding.
    pub latent: ParamId,
    /// `d_m -> P` linear probe.
    pub probe: Linear,
}

impl MlfieParams {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        cfg: &MlfieConfig,
        p_dim: usize,
        n_herb: usize,
    ) -> Self {
        Self {
            attn: AttentionParams::new(store, rng, &format!("{name}.attn"), p_dim, cfg.d_m, cfg.d_k),
            gate: GateParams::new(store, rng, &format!("{name}.gate"), cfg.d_m, cfg.gate),
            latent: store.insert(&format!("{name}.latent"), Matrix::randn(n_herb, cfg.d_m, cfg.latent_init_std, rng)),
            probe: Linear::new(store, rng, &format!("{name}.probe"), cfg.d_m, p_dim, true),
        }
    }

    /// Pooled vectors of every herb (`H x d_m`): attention for herbs with
    /// molecules, rows of `imputed` for the rest.
    pub fn pooled(&self, tape: &mut Tape, store: &ParamStore, props: &Matrix, mols: &MoleculeSet, imputed: &Matrix) -> Var {
        let complete = mols.complete();
        let missing = mols.missing();
        let mut parts = Vec::new();
        if !complete.is_empty() {
            let p = tape.constant(props.gather_rows(&complete));
            parts.push(self.attn.forward(tape, store, p, mols, &complete).0);
        }
        if !missing.is_empty() {
            parts.push(tape.constant(imputed.gather_rows(&missing)));
        }
        let stacked = tape.concat_rows(&parts);
        let mut pos = vec![0; mols.n_herb()];
        for (i, &h) in complete.iter().chain(&missing).enumerate() {
            pos[h] = i;
        }
        tape.gather_rows(stacked, &pos)
    }

    /// Final molecular vector of every herb (`H x d_m`).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, props: &Matrix, mols: &MoleculeSet, imputed: &Matrix) -> Var {
        let v = self.pooled(tape, store, props, mols, imputed);
        let h_e = tape.param(store, self.latent);
        self.gate.forward(tape, store, v, h_e)
    }

    /// Probe loss: mean squared error of predicting `p_h` from pooled vectors
    /// of herbs with molecules.
    pub fn probe_loss(&self, tape: &mut Tape, store: &ParamStore, props: &Matrix, mols: &MoleculeSet, herbs: &[usize]) -> Var {
        let target = props.gather_rows(herbs);
        let p = tape.constant(target.clone());
        let (v, _) = self.attn.forward(tape, store, p, mols, herbs);
        let pred = self.probe.forward(tape, store, v);
        let t = tape.constant(target);
        let d = tape.sub(pred, t);
        let sq = tape.square(d);
        tape.mean_all(sq)
    }
}

/// Final vector of one herb: pooled molecules when present, otherwise the
/// VAE imputation, then the gate with the herb's latent embedding.
pub fn herb_representation(
    herb: usize,
    p_h: &[f64],
    mols: &MoleculeSet,
    params: &MlfieParams,
    vae: &Vae,
    store: &ParamStore,
    mode: ImputeMode,
) -> Result<Vec<f64>> {
    let v_h = if mols.has_molecules(herb) {
        aggregate_attention(&mols.of(herb), p_h, &params.attn, store)?.0
    } else {
        impute_missing(p_h, vae, store, mode, &mut seeded(herb as u64, "impute"))?
    };
    fuse_gate(&v_h, store.get(params.latent).row(herb), &params.gate, store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    #[test]
    fn stub_encoder_is_deterministic_and_unit_norm() {
        let a = stub_encode_molecule("CCO", 32).unwrap();
        assert_eq!(a, stub_encode_molecule("CCO", 32).unwrap());
        assert_ne!(a, stub_encode_molecule("CCN", 32).unwrap());
        for s in ["C", "CC(=O)O", "c1ccccc1", "N", "ClCCl"] {
            let v = stub_encode_molecule(s, 16).unwrap();
            let n: f64 = v.iter().map(|x| x * x).sum();
            assert!((libm::sqrt(n) - 1.0).abs() < 1e-6);
        }
        assert!(stub_encode_molecule("", 8).is_err());
    }

    fn attn(p: usize, d_m: usize, d_k: usize) -> (ParamStore, AttentionParams) {
        let mut store = ParamStore::new();
        let a = AttentionParams::new(&mut store, &mut seeded(1, "a"), "attn", p, d_m, d_k);
        (store, a)
    }

    #[test]
    fn single_molecule_gets_all_weight() {
        let (store, a) = attn(3, 4, 2);
        let e = Matrix::row_vector(vec![0.1, 0.2, 0.3, 0.4]);
        let (v, alpha) = aggregate_attention(&e, &[1.0, -1.0, 0.5], &a, &store).unwrap();
        assert_eq!(alpha, vec![1.0]);
        assert_eq!(v, e.data);
    }

    #[test]
    fn zero_query_weights_average_molecules() {
        let (mut store, a) = attn(3, 2, 2);
        *store.get_mut(a.w_q) = Matrix::zeros(3, 2);
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let (v, alpha) = aggregate_attention(&e, &[1.0, 2.0, 3.0], &a, &store).unwrap();
        for x in alpha {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[0] - 2.0 / 3.0).abs() < 1e-15 && (v[1] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn logits_zero_and_ln2_give_one_third_two_thirds() {
        // d_k = 1, W_q = [1], W_k = [1]: logit_k = p * e_k.
        let (mut store, a) = attn(1, 1, 1);
        *store.get_mut(a.w_q) = Matrix::filled(1, 1, 1.0);
        *store.get_mut(a.w_k) = Matrix::filled(1, 1, 1.0);
        let e = Matrix::from_rows(&[vec![0.0], vec![core::f64::consts::LN_2]]);
        let (_, alpha) = aggregate_attention(&e, &[1.0], &a, &store).unwrap();
        assert!((alpha[0] - 1.0 / 3.0).abs() < 1e-12 && (alpha[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn attention_is_a_convex_combination_invariant_to_molecule_order() {
        let (store, a) = attn(4, 5, 3);
        let mut rng = seeded(3, "mol");
        for _ in 0..50 {
            let k = rng.random_range(1..6);
            let e = Matrix::randn(k, 5, 1.0, &mut rng);
            let p: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let (v, alpha) = aggregate_attention(&e, &p, &a, &store).unwrap();
            assert!(alpha.iter().all(|&x| x >= 0.0));
            assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            for c in 0..5 {
                let col: Vec<f64> = (0..k).map(|r| e.get(r, c)).collect();
                let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                assert!(v[c] >= lo - 1e-12 && v[c] <= hi + 1e-12);
            }
            let rev: Vec<usize> = (0..k).rev().collect();
            let (v2, _) = aggregate_attention(&e.gather_rows(&rev), &p, &a, &store).unwrap();
            for (x, y) in v.iter().zip(&v2) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        assert!(aggregate_attention(&Matrix::zeros(0, 5), &[0.0; 4], &a, &store).is_err());
    }

    #[test]
    fn batched_attention_matches_per_herb() {
        let (store, a) = attn(3, 4, 2);
        let mut rng = seeded(5, "b");
        let herbs: Vec<HerbRecord> = (0..4)
            .map(|i| HerbRecord {
                id: i,
                name: format!("h{i}"),
                properties: vec![0.0; 3],
                molecules: (0..=i).map(|j| format!("C{}O{}", "C".repeat(j), i)).collect(),
                mol_embeddings: None,
            })
            .collect();
        let mols = MoleculeSet::from_herbs(&herbs, 4).unwrap();
        let props = Matrix::randn(4, 3, 1.0, &mut rng);
        let mut tape = Tape::new();
        let p = tape.constant(props.clone());
        let (v, _) = a.forward(&mut tape, &store, p, &mols, &[0, 1, 2, 3]);
        for h in 0..4 {
            let (single, _) = aggregate_attention(&mols.of(h), props.row(h), &a, &store).unwrap();
            for (x, y) in tape.value(v).row(h).iter().zip(&single) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    fn gate(d: usize, shape: GateShape) -> (ParamStore, GateParams) {
        let mut store = ParamStore::new();
        let g = GateParams::new(&mut store, &mut seeded(2, "g"), "gate", d, shape);
        (store, g)
    }

    #[test]
    fn gate_examples() {
        let (mut store, g) = gate(2, GateShape::Vector);
        *store.get_mut(g.lin.w) = Matrix::zeros(2, 2);
        let out = fuse_gate(&[1.0, 3.0], &[3.0, -1.0], &g, &store).unwrap();
        assert_eq!(out, vec![2.0, 1.0]);
        *store.get_mut(g.lin.b.unwrap()) = Matrix::filled(1, 2, 50.0);
        let out = fuse_gate(&[1.0, 3.0], &[3.0, -1.0], &g, &store).unwrap();
        assert!((out[0] - 1.0).abs() < 1e-9 && (out[1] - 3.0).abs() < 1e-9);
        // sigmoid(ln 4) = 0.8
        *store.get_mut(g.lin.b.unwrap()) = Matrix::filled(1, 2, libm::log(4.0));
        let out = fuse_gate(&[1.0, 0.0], &[0.0, 1.0], &g, &store).unwrap();
        assert!((out[0] - 0.8).abs() < 1e-12 && (out[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn gate_output_stays_between_its_inputs() {
        for shape in [GateShape::Vector, GateShape::Scalar] {
            let (store, g) = gate(4, shape);
            let mut rng = seeded(8, "conv");
            for _ in 0..1000 {
                let v: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
                let h: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 10.0 - 5.0).collect();
                let out = fuse_gate(&v, &h, &g, &store).unwrap();
                for j in 0..4 {
                    assert!(out[j] >= v[j].min(h[j]) - 1e-12 && out[j] <= v[j].max(h[j]) + 1e-12);
                }
            }
        }
    }

    fn vae(p: usize, d_z: usize, d_m: usize) -> (ParamStore, Vae) {
        let mut store = ParamStore::new();
        let v = Vae::new(&mut store, &mut seeded(4, "vae"), "vae", p, 6, d_z, d_m);
        (store, v)
    }

    #[test]
    fn kl_closed_form_cases() {
        assert_eq!(kl_divergence(&[0.0, 0.0], &[0.0, 0.0]), 0.0);
        assert!((kl_divergence(&[1.0], &[0.0]) - 0.5).abs() < 1e-15);
        let (mut store, v) = vae(3, 1, 2);
        for l in [v.mu, v.logvar] {
            *store.get_mut(l.w) = Matrix::zeros(6, 1);
        }
        let (_, kl, _) = vae_loss::<crate::rng::StageRng>(&[1.0, 2.0, 3.0], &[0.0, 0.0], &v, &store, 1.0, None).unwrap();
        assert_eq!(kl, 0.0);
        *store.get_mut(v.mu.b.unwrap()) = Matrix::filled(1, 1, 1.0);
        let (_, kl, _) = vae_loss::<crate::rng::StageRng>(&[1.0, 2.0, 3.0], &[0.0, 0.0], &v, &store, 1.0, None).unwrap();
        assert!((kl - 0.5).abs() < 1e-15);
    }

    #[test]
    fn kl_is_never_negative() {
        let mut rng = seeded(1, "kl");
        for _ in 0..1000 {
            let mu: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            let lv: Vec<f64> = (0..4).map(|_| rng.random::<f64>() * 6.0 - 3.0).collect();
            assert!(kl_divergence(&mu, &lv) >= 0.0);
        }
    }

    #[test]
    fn perfect_decoder_has_zero_reconstruction() {
        let (mut store, v) = vae(3, 2, 2);
        *store.get_mut(v.out.w) = Matrix::zeros(6, 2);
        *store.get_mut(v.out.b.unwrap()) = Matrix::row_vector(vec![0.3, -0.7]);
        let (loss, kl, recon) = vae_loss::<crate::rng::StageRng>(&[1.0, 0.0, 2.0], &[0.3, -0.7], &v, &store, 1.0, None).unwrap();
        assert_eq!(recon, 0.0);
        assert_eq!(loss, kl);
    }

    #[test]
    fn imputation_checks_width_and_is_deterministic_in_mean_mode() {
        let (store, v) = vae(3, 2, 2);
        let mut rng = seeded(0, "i");
        let a = impute_missing(&[0.1, 0.2, 0.3], &v, &store, ImputeMode::Mean, &mut rng).unwrap();
        let b = impute_missing(&[0.1, 0.2, 0.3], &v, &store, ImputeMode::Mean, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(matches!(impute_missing(&[0.1, 0.2], &v, &store, ImputeMode::Mean, &mut rng), Err(Error::Dimension(_))));
    }

    #[test]
    fn vae_training_is_seeded_and_zero_epochs_is_a_no_op() {
        let (store0, v) = vae(3, 2, 2);
        let mut rng = seeded(9, "data");
        let props = Matrix::randn(10, 3, 1.0, &mut rng);
        let targets = Matrix::randn(10, 2, 1.0, &mut rng);
        let cfg = TrainConfig { epochs: 30, ..TrainConfig::default() };
        let (mut s1, mut s2, mut s3) = (store0.clone(), store0.clone(), store0.clone());
        train_vae(&mut s1, &v, &props, &targets, &cfg, 1.0, "vae").unwrap();
        train_vae(&mut s2, &v, &props, &targets, &cfg, 1.0, "vae").unwrap();
        assert_eq!(s1, s2);
        train_vae(&mut s3, &v, &props, &targets, &cfg.clone().with_epochs(0), 1.0, "vae").unwrap();
        assert_eq!(s3, store0);
        let few = props.gather_rows(&[0, 1, 2]);
        assert!(train_vae(&mut s3, &v, &few, &targets.gather_rows(&[0, 1, 2]), &cfg, 1.0, "vae").is_err());
    }

    #[test]
    fn gradients_of_attention_gate_and_vae() {
        let mut store = ParamStore::new();
        let mut rng = seeded(12, "gc");
        let a = AttentionParams::new(&mut store, &mut rng, "attn", 3, 4, 2);
        let g = GateParams::new(&mut store, &mut rng, "gate", 4, GateShape::Vector);
        let v = Vae::new(&mut store, &mut rng, "vae", 3, 5, 2, 4);
        let latent = store.insert("latent", Matrix::randn(3, 4, 0.5, &mut rng));
        let props = Matrix::randn(3, 3, 1.0, &mut rng);
        let herbs: Vec<HerbRecord> = (0..3)
            .map(|i| HerbRecord {
                id: i,
                name: format!("h{i}"),
                properties: props.row(i).to_vec(),
                molecules: (0..i + 2).map(|j| format!("CO{}N{}", j, i)).collect(),
                mol_embeddings: None,
            })
            .collect();
        let mols = MoleculeSet::from_herbs(&herbs, 4).unwrap();
        let eps = Matrix::randn(3, 2, 1.0, &mut rng);
        let report = check_gradients(&store, 1e-6, |tape, store| {
            let p = tape.constant(props.clone());
            let (pooled, _) = a.forward(tape, store, p, &mols, &[0, 1, 2]);
            let h = tape.param(store, latent);
            let fused = g.forward(tape, store, pooled, h);
            let t = tape.unary(fused, crate::autodiff::Unary::Tanh);
            let l1 = tape.sum_all(t);
            let pv = tape.constant(props.clone());
            let l2 = v.loss(tape, store, pv, fused, Some(eps.clone()), 0.7).loss;
            tape.add(l1, l2)
        });
        assert!(report.max_rel_error < 1e-4, "{report:?}");
    }
}
