//! Run configuration read from TOML.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fmash_core::pipeline::{Ablation, PipelineConfig, Stages, TrainMode};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory holding the three corpus files.
    pub corpus: PathBuf,
    /// Output directory for splits, checkpoints, predictions and reports.
    #[serde(default = "default_work")]
    pub work: PathBuf,
    /// Optional precomputed molecule table.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub molecules: Option<PathBuf>,
}

fn default_work() -> PathBuf {
    PathBuf::from("fmash-work")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Head {
    Rs,
    Seq,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub paths: Paths,
    /// Graph feature width.
    #[serde(default = "d64")]
    pub d: usize,
    #[serde(default = "d32")]
    pub d_m: usize,
    #[serde(default = "d16")]
    pub d_k: usize,
    #[serde(default = "d64")]
    pub d_enc: usize,
    #[serde(default = "d16")]
    pub d_z: usize,
    /// Property vector width.
    #[serde(default = "p23")]
    pub p: usize,
    #[serde(default = "two")]
    pub tau_s: usize,
    #[serde(default = "two")]
    pub tau_h: usize,
    /// Overrides the learning rate of every stage when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// Overrides the epoch count of every stage when set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    /// Overrides the minibatch size of every stage when set; `0` is full batch.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default = "seed42")]
    pub seed: u64,
    #[serde(default = "ratio")]
    pub split: [f64; 3],
    #[serde(default = "heads")]
    pub heads: Vec<Head>,
    #[serde(default)]
    pub mode: TrainMode,
    #[serde(default)]
    pub ablation: Ablation,
    #[serde(default)]
    pub stages: Stages,
}

fn d64() -> usize {
    64
}
fn d32() -> usize {
    32
}
fn d16() -> usize {
    16
}
fn p23() -> usize {
    23
}
fn two() -> usize {
    2
}
fn seed42() -> u64 {
    42
}
fn ratio() -> [f64; 3] {
    [0.7, 0.1, 0.2]
}
fn heads() -> Vec<Head> {
    vec![Head::Rs, Head::Seq]
}

impl RunConfig {
    /// Defaults with only the corpus path set.
    pub fn with_corpus(corpus: impl Into<PathBuf>) -> Self {
        Self {
            paths: Paths { corpus: corpus.into(), work: default_work(), molecules: None },
            d: 64,
            d_m: 32,
            d_k: 16,
            d_enc: 64,
            d_z: 16,
            p: 23,
            tau_s: 2,
            tau_h: 2,
            lr: None,
            epochs: None,
            batch: None,
            seed: 42,
            split: ratio(),
            heads: heads(),
            mode: TrainMode::Staged,
            ablation: Ablation::default(),
            stages: Stages::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config { path: String::new(), msg: e.to_string() })?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config { path, msg: e.into_inner().message().to_string() }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [Some(&mut cfg.paths.corpus), Some(&mut cfg.paths.work), cfg.paths.molecules.as_mut()].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Rejects zero widths, bad ratios and empty head lists.
    pub fn validate(&self) -> Result<()> {
        let dims = [("d", self.d), ("d_m", self.d_m), ("d_k", self.d_k), ("d_enc", self.d_enc), ("d_z", self.d_z), ("p", self.p)];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config { path: name.into(), msg: "must be >= 1".into() });
            }
        }
        for (name, v) in [("tau_s", self.tau_s), ("tau_h", self.tau_h)] {
            if v == 0 {
                return Err(Error::Config { path: name.into(), msg: "must be >= 1".into() });
            }
        }
        if !self.d_enc.is_multiple_of(4) {
            return Err(Error::Config { path: "d_enc".into(), msg: "must be divisible by the 4 attention heads".into() });
        }
        if let Some(lr) = self.lr.filter(|lr| !(lr.is_finite() && *lr > 0.0)) {
            return Err(Error::Config { path: "lr".into(), msg: format!("must be positive, got {lr}") });
        }
        let sum: f64 = self.split.iter().sum();
        if self.split.iter().any(|&r| r <= 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config { path: "split".into(), msg: "ratios must be positive and sum to 1".into() });
        }
        if self.heads.is_empty() {
            return Err(Error::Config { path: "heads".into(), msg: "select at least one head".into() });
        }
        Ok(())
    }

    /// Applies `FMASH_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(s) = std::env::var("FMASH_SEED") {
            self.seed = s.trim().parse().map_err(|_| Error::Config { path: "FMASH_SEED".into(), msg: format!("not an integer: '{s}'") })?;
        }
        Ok(())
    }

    pub fn pipeline(&self) -> PipelineConfig {
        let mut p = PipelineConfig { seed: self.seed, p_dim: self.p, tau_s: self.tau_s, tau_h: self.tau_h, ..PipelineConfig::default() };
        p.hgre.d = self.d;
        p.mlfie.d_m = self.d_m;
        p.mlfie.d_k = self.d_k;
        p.mlfie.d_z = self.d_z;
        p.rs.d_enc = self.d_enc;
        p.ablation = self.ablation;
        p.mode = self.mode;
        p.stages = self.stages.clone();
        let st = &mut p.stages;
        for t in [&mut st.link, &mut st.probe, &mut st.vae, &mut st.fr, &mut st.rs, &mut st.seq] {
            if let Some(lr) = self.lr {
                t.lr = lr;
            }
            if let Some(e) = self.epochs {
                t.epochs = e;
            }
            if let Some(b) = self.batch {
                t.batch_size = b;
            }
        }
        p
    }

    /// Hex SHA-256 of the model-relevant configuration (paths excluded).
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(&self.pipeline()).expect("pipeline config serialises");
        let extra = format!("{:?}|{:?}", self.split, self.heads);
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.update(extra.as_bytes());
        hex::encode(h.finalize())
    }
}
