//! Per-node feature assembly and compression to unified 64-d embeddings.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::data::SymptomRecord;
use crate::error::{ensure_finite, Error, Result};
use crate::nn::Linear;
use crate::params::ParamStore;
use crate::tensor::Matrix;
use crate::train::{fit, TrainConfig};

/// Width of the unified embeddings.
pub const UNIFIED_DIM: usize = 64;

/// Column layout of assembled rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub d_graph: usize,
    pub d_m: usize,
    pub p_dim: usize,
    pub d_text: usize,
}

impl FeatureLayout {
    /// `[graph ‖ molecular ‖ properties]`.
    pub fn herb_dim(&self) -> usize {
        self.d_graph + self.d_m + self.p_dim
    }

    /// `[graph ‖ text]`.
    pub fn sym_dim(&self) -> usize {
        self.d_graph + self.d_text
    }
}

/// Unified symptom and herb tables shared by both recommendation heads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnifiedEmbeddings {
    /// `S x 64`.
    pub sym: Matrix,
    /// `H x 64`.
    pub herb: Matrix,
}

fn hcat(parts: &[&Matrix]) -> Result<Matrix> {
    let rows = parts[0].rows;
    if parts.iter().any(|p| p.rows != rows) {
        return Err(Error::Dimension(format!(
            "component row counts differ: {:?}",
            parts.iter().map(|p| p.rows).collect::<Vec<_>>()
        )));
    }
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut c = 0;
        for p in parts {
            out.row_mut(r)[c..c + p.cols].copy_from_slice(p.row(r));
            c += p.cols;
        }
    }
    Ok(out)
}

pub fn assemble_herbs(graph: &Matrix, molecular: &Matrix, props: &Matrix, layout: &FeatureLayout) -> Result<Matrix> {
    if graph.cols != layout.d_graph || molecular.cols != layout.d_m || props.cols != layout.p_dim {
        return Err(Error::Dimension("herb components do not match the layout".into()));
    }
    hcat(&[graph, molecular, props])
}

pub fn assemble_symptoms(graph: &Matrix, text: &Matrix, layout: &FeatureLayout) -> Result<Matrix> {
    if graph.cols != layout.d_graph || text.cols != layout.d_text {
        return Err(Error::Dimension("symptom components do not match the layout".into()));
    }
    hcat(&[graph, text])
}

/// Text embedding of every symptom: the record's own vector when present,
/// otherwise the corresponding row of `fallback`.
pub fn symptom_text(records: &[SymptomRecord], fallback: &Matrix) -> Result<Matrix> {
    if fallback.rows != records.len() {
        return Err(Error::Dimension("fallback table rows differ from symptom count".into()));
    }
    let mut out = fallback.clone();
    for (i, r) in records.iter().enumerate() {
        if let Some(e) = &r.text_embedding {
            if e.len() != fallback.cols {
                return Err(Error::schema(
                    format!("symptom '{}'", r.name),
                    format!("text embedding of width {} (expected {})", e.len(), fallback.cols),
                ));
            }
            out.row_mut(i).copy_from_slice(e);
        }
    }
    Ok(out)
}

/// One-hidden-layer autoencoder with a 64-wide code.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Autoencoder {
    pub enc: [Linear; 2],
    pub dec: [Linear; 2],
    pub d_in: usize,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, d_in: usize, hidden: usize) -> Self {
        Self {
            enc: [
                Linear::new(store, rng, &format!("{name}.enc0"), d_in, hidden, true),
                Linear::new(store, rng, &format!("{name}.enc1"), hidden, UNIFIED_DIM, true),
            ],
            dec: [
                Linear::new(store, rng, &format!("{name}.dec0"), UNIFIED_DIM, hidden, true),
                Linear::new(store, rng, &format!("{name}.dec1"), hidden, d_in, true),
            ],
            d_in,
        }
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.enc[0].forward(tape, store, x);
        let h = tape.relu(h);
        self.enc[1].forward(tape, store, h)
    }

    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Var {
        let h = self.dec[0].forward(tape, store, z);
        let h = tape.relu(h);
        self.dec[1].forward(tape, store, h)
    }

    /// Mean squared reconstruction error on tape.
    pub fn mse(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let z = self.encode(tape, store, x);
        let r = self.decode(tape, store, z);
        let d = tape.sub(r, x);
        let sq = tape.square(d);
        tape.mean_all(sq)
    }

    pub fn reconstruct(&self, store: &ParamStore, x: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let z = self.encode(&mut tape, store, xv);
        let r = self.decode(&mut tape, store, z);
        tape.value(r).clone()
    }

    pub fn reconstruction_mse(&self, store: &ParamStore, x: &Matrix) -> f64 {
        self.reconstruct(store, x).mean_squared_error(x)
    }
}

/// Maps assembled rows to unified embeddings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Refiner {
    Autoencoder(Autoencoder),
    /// Used when refinement is switched off.
    Projection(Linear),
}

impl Refiner {
    pub fn d_in(&self) -> usize {
        match self {
            Refiner::Autoencoder(a) => a.d_in,
            Refiner::Projection(l) => l.d_in,
        }
    }

    pub fn compress_tape(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        match self {
            Refiner::Autoencoder(a) => a.encode(tape, store, x),
            Refiner::Projection(l) => l.forward(tape, store, x),
        }
    }
}

/// Unified embeddings of `assembled` (`n x 64`).
pub fn compress(assembled: &Matrix, refiner: &Refiner, store: &ParamStore) -> Result<Matrix> {
    if assembled.cols != refiner.d_in() {
        return Err(Error::Dimension(format!(
            "assembled rows have {} columns, refiner expects {}",
            assembled.cols,
            refiner.d_in()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(assembled.clone());
    let z = refiner.compress_tape(&mut tape, store, x);
    let z = tape.value(z).clone();
    ensure_finite(&z, "unified embeddings")?;
    Ok(z)
}

/// Fits `ae` to reconstruct `data`; returns per-epoch MSE.
pub fn train_autoencoder(
    store: &mut ParamStore,
    ae: &Autoencoder,
    data: &Matrix,
    cfg: &TrainConfig,
    prefix: &str,
) -> Result<Vec<f64>> {
    if data.rows < 8 {
        return Err(Error::InsufficientData(format!("autoencoder needs at least 8 rows, got {}", data.rows)));
    }
    if data.cols != ae.d_in {
        return Err(Error::Dimension("autoencoder input width".into()));
    }
    if (1..data.rows).all(|r| data.row(r) == data.row(0)) {
        log::warn!("{prefix}: all assembled rows are identical");
    }
    fit(store, &[prefix], cfg, data.rows, prefix, |tape, store, batch| {
        let x = tape.constant(data.gather_rows(batch));
        Ok(ae.mse(tape, store, x))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use alloc::vec;

    const LAYOUT: FeatureLayout = FeatureLayout { d_graph: 32, d_m: 16, p_dim: 23, d_text: 8 };

    #[test]
    fn herb_row_length_is_the_sum_of_components() {
        assert_eq!(LAYOUT.herb_dim(), 71);
        let a = assemble_herbs(&Matrix::zeros(2, 32), &Matrix::zeros(2, 16), &Matrix::zeros(2, 23), &LAYOUT).unwrap();
        assert_eq!(a.shape(), (2, 71));
        assert_eq!(a.max_abs(), 0.0);
        assert!(assemble_herbs(&Matrix::zeros(2, 32), &Matrix::zeros(3, 16), &Matrix::zeros(2, 23), &LAYOUT).is_err());
    }

    #[test]
    fn symptom_rows_follow_the_layout() {
        let g = Matrix::filled(1, 32, 1.0);
        let t = Matrix::filled(1, 8, 2.0);
        let a = assemble_symptoms(&g, &t, &LAYOUT).unwrap();
        assert_eq!(&a.row(0)[30..34], &[1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn missing_text_uses_fallback_rows() {
        let recs = vec![
            SymptomRecord { id: 0, name: "a".into(), text_embedding: Some(vec![1.0, 2.0]) },
            SymptomRecord { id: 1, name: "b".into(), text_embedding: None },
        ];
        let fb = Matrix::from_rows(&[vec![9.0, 9.0], vec![5.0, 6.0]]);
        assert_eq!(symptom_text(&recs, &fb).unwrap().data, vec![1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn small_inputs_are_reconstructed_almost_exactly() {
        let mut store = ParamStore::new();
        let mut rng = seeded(3, "ae");
        let ae = Autoencoder::new(&mut store, &mut rng, "fr", 20, 128);
        let data = Matrix::randn(40, 20, 1.0, &mut rng);
        let init = ae.reconstruction_mse(&store, &data);
        let cfg = TrainConfig { epochs: 400, lr: 3e-3, ..TrainConfig::default() };
        let hist = train_autoencoder(&mut store, &ae, &data, &cfg, "fr").unwrap();
        let fin = ae.reconstruction_mse(&store, &data);
        assert!(fin <= 1e-3, "final mse {fin}");
        assert!(fin < 0.5 * init);
        assert!(crate::train::smoothed_non_increasing(&hist, 10, 1e-6));
    }

    #[test]
    fn compress_is_rowwise_and_64_wide() {
        let mut store = ParamStore::new();
        let mut rng = seeded(3, "ae");
        let ae = Autoencoder::new(&mut store, &mut rng, "fr", 10, 16);
        let r = Refiner::Autoencoder(ae.clone());
        let x = Matrix::randn(5, 10, 1.0, &mut rng);
        let z = compress(&x, &r, &store).unwrap();
        assert_eq!(z.shape(), (5, UNIFIED_DIM));
        let perm = [4, 2, 0, 1, 3];
        assert_eq!(compress(&x.gather_rows(&perm), &r, &store).unwrap(), z.gather_rows(&perm));
        let twin = Matrix::from_rows(&[x.row(0).to_vec(), x.row(0).to_vec()]);
        let zt = compress(&twin, &r, &store).unwrap();
        assert_eq!(zt.row(0), zt.row(1));
        assert!(compress(&Matrix::zeros(1, 9), &r, &store).is_err());
        // reported error is the MSE of decode(encode(x)) against x
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = ae.mse(&mut tape, &store, xv);
        assert!((tape.scalar(l) - ae.reconstruct(&store, &x).mean_squared_error(&x)).abs() < 1e-15);
    }

    #[test]
    fn zero_epochs_and_seed_reproducibility() {
        let mut store = ParamStore::new();
        let mut rng = seeded(3, "ae");
        let ae = Autoencoder::new(&mut store, &mut rng, "fr", 6, 8);
        let data = Matrix::randn(9, 6, 1.0, &mut rng);
        let mut a = store.clone();
        train_autoencoder(&mut a, &ae, &data, &TrainConfig::default().with_epochs(0), "fr").unwrap();
        assert_eq!(a, store);
        let (mut b, mut c) = (store.clone(), store.clone());
        train_autoencoder(&mut b, &ae, &data, &TrainConfig::default().with_epochs(5), "fr").unwrap();
        train_autoencoder(&mut c, &ae, &data, &TrainConfig::default().with_epochs(5), "fr").unwrap();
        assert_eq!(b, c);
        assert!(train_autoencoder(&mut b, &ae, &data.gather_rows(&[0, 1]), &TrainConfig::default(), "fr").is_err());
    }
}
