//! Command-line surface: `prepare`, `train-rs`, `train-seq`, `impute-mol`,
//! `recommend`, `generate`, `evaluate` and `synth`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use fmash_core::data::{build_graph, generate_synthetic, split_dataset, Corpus, DatasetSplit, Prescription, SynthConfig};
use fmash_core::metrics::{evaluate, Averaging, EvalOptions, MetricReport};
use fmash_core::pipeline::Fmash;
use fmash_core::seqgen::DecodeOptions;

use crate::checkpoint;
use crate::config::{Head, RunConfig};
use crate::error::{Error, Result};
use crate::io;

#[derive(Debug, Parser)]
#[command(name = "fmash", version, about = "Symptom-to-herb formula recommendation")]
pub struct Cli {
    /// Run configuration (TOML).
    #[arg(long, short, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load the corpus, build the graph and write the split.
    Prepare,
    /// Pretrain features and train the ranked head; exports test predictions.
    TrainRs,
    /// Pretrain features and train the sequence head; exports test predictions.
    TrainSeq,
    /// Train the molecular stage and export pooled and imputed vectors.
    ImputeMol {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k herbs for a comma-separated list of symptom names.
    Recommend {
        #[arg(long)]
        symptoms: String,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// Generate a formula for a comma-separated list of symptom names.
    Generate {
        #[arg(long)]
        symptoms: String,
    },
    /// Score a prediction export against a split.
    Evaluate(EvaluateArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "5,10,20")]
    pub k: Vec<usize>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Model name recorded in the report; defaults to the file stem.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub micro: bool,
    /// Also report P/R/F1 for sequence predictions.
    #[arg(long)]
    pub classic: bool,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 40)]
    pub n_sym: usize,
    #[arg(long, default_value_t = 60)]
    pub n_herb: usize,
    #[arg(long, default_value_t = 5)]
    pub n_syndromes: usize,
    #[arg(long, default_value_t = 200)]
    pub n_prescriptions: usize,
    #[arg(long, default_value_t = 23)]
    pub p: usize,
    #[arg(long, default_value_t = 0.2)]
    pub missing_mol: f64,
}

/// Parses `argv` and runs the command, writing human output to `out`.
pub fn run<I, T>(argv: I, out: &mut dyn std::io::Write) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| Error::Usage(e.to_string()))?;
    execute(cli, out)
}

fn say(out: &mut dyn std::io::Write, s: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", s.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

/// Loaded configuration, corpus and split.
pub struct Workspace {
    pub cfg: RunConfig,
    pub corpus: Corpus,
    pub split: DatasetSplit,
}

impl Workspace {
    pub fn open(config: Option<&Path>) -> Result<Self> {
        let path = config.ok_or_else(|| Error::Usage("this command needs --config <FILE>".into()))?;
        let mut cfg = RunConfig::load(path)?;
        cfg.apply_env()?;
        Self::from_config(cfg)
    }

    pub fn from_config(cfg: RunConfig) -> Result<Self> {
        let mut corpus = io::load_corpus(&cfg.paths.corpus, cfg.p)?;
        if let Some(m) = &cfg.paths.molecules {
            let (dim, table) = io::load_molecular_table(m, Some(corpus.n_herb()))?;
            if dim != cfg.d_m {
                return Err(Error::parse(m, 1, format!("table has dim={dim}, config d_m={}", cfg.d_m)));
            }
            io::attach_molecular_table(&mut corpus, table)?;
        }
        let split = split_dataset(corpus.prescriptions.len(), cfg.split, cfg.seed)?;
        Ok(Self { cfg, corpus, split })
    }

    pub fn instances(&self, which: &str) -> Result<(Vec<usize>, Vec<&Prescription>)> {
        let idx = match which {
            "train" => &self.split.train,
            "valid" => &self.split.valid,
            "test" => &self.split.test,
            other => return Err(Error::Usage(format!("unknown split '{other}' (train, valid, test)"))),
        };
        Ok((idx.clone(), idx.iter().map(|&i| &self.corpus.prescriptions[i]).collect()))
    }

    pub fn work(&self, file: &str) -> PathBuf {
        self.cfg.paths.work.join(file)
    }

    pub fn model(&self) -> Result<Fmash> {
        let (_, train) = self.instances("train")?;
        Ok(Fmash::new(&self.cfg.pipeline(), &self.corpus, &train)?)
    }

    /// Rebuilds the model and loads a checkpoint written under this config.
    pub fn restore(&self, file: &str) -> Result<Fmash> {
        let path = self.work(file);
        let ck = checkpoint::load(&path)?;
        if ck.manifest.config_hash != self.cfg.hash() {
            return Err(Error::Checkpoint { path, msg: "written under a different configuration".into() });
        }
        let mut m = self.model()?;
        m.load_values(&ck.values)?;
        Ok(m)
    }

    /// Resolves comma-separated symptom names, suggesting near matches for
    /// unknown ones.
    pub fn resolve_symptoms(&self, names: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for name in names.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match self.corpus.symptoms.iter().find(|s| s.name == name) {
                Some(s) => ids.push(s.id),
                None => {
                    let near = near_matches(name, self.corpus.symptoms.iter().map(|s| s.name.as_str()));
                    let hint = if near.is_empty() { String::new() } else { format!("; did you mean {}?", near.join(", ")) };
                    return Err(Error::Usage(format!("unknown symptom '{name}'{hint}")));
                }
            }
        }
        if ids.is_empty() {
            return Err(Error::Usage("--symptoms is empty".into()));
        }
        Ok(ids)
    }
}

/// Up to three vocabulary entries closest to `name`.
pub fn near_matches<'a>(name: &str, vocab: impl Iterator<Item = &'a str>) -> Vec<String> {
    let lower = name.to_lowercase();
    let mut scored: Vec<(f64, &str)> =
        vocab.map(|v| (strsim::jaro_winkler(&lower, &v.to_lowercase()), v)).filter(|(s, _)| *s >= 0.75).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().take(3).map(|(_, v)| format!("'{v}'")).collect()
}

fn train_head(ws: &Workspace, head: Head, out: &mut dyn std::io::Write) -> Result<()> {
    let (_, train) = ws.instances("train")?;
    let (test_ids, test) = ws.instances("test")?;
    let mut m = ws.model()?;
    log::info!("pretraining on {} training instances", train.len());
    let pre = m.pretrain()?;
    if let Some(fr) = pre.fr {
        say(out, format!("refinement mse: symptoms {:.4} -> {:.4}, herbs {:.4} -> {:.4}", fr.sym_init, fr.sym_final, fr.herb_init, fr.herb_final))?;
    }
    log::info!("training {head:?} head");
    let sets: Vec<Vec<usize>> = test.iter().map(|p| p.symptoms.clone()).collect();
    let (name, hist) = match head {
        Head::Rs => {
            let hist = m.train_rs(&train)?;
            let scores = if sets.is_empty() { Vec::new() } else { m.score(&sets)? };
            io::write_ranked(&ws.work("pred_rs.tsv"), &test_ids.iter().copied().zip(scores).collect::<Vec<_>>())?;
            ("rs", hist)
        }
        Head::Seq => {
            let hist = m.train_seq(&train)?;
            let gens = if sets.is_empty() { Vec::new() } else { m.generate(&sets, DecodeOptions::default())? };
            io::write_sequences(&ws.work("pred_seq.tsv"), &test_ids.iter().copied().zip(gens).collect::<Vec<_>>())?;
            ("seq", hist)
        }
    };
    io::write_unified(&ws.work("unified.tsv"), &m.unified()?)?;
    io::save_json(&ws.work(&format!("history_{name}.json")), &(&pre, &hist))?;
    checkpoint::save(&ws.work(&format!("{name}.ckpt")), &m.store, &ws.cfg.hash(), &["pretrain".into(), name.into()])?;
    say(
        out,
        format!(
            "{name}: {} epochs, loss {:.4} -> {:.4}; wrote {}",
            hist.len(),
            hist.first().copied().unwrap_or(f64::NAN),
            hist.last().copied().unwrap_or(f64::NAN),
            ws.work(&format!("{name}.ckpt")).display()
        ),
    )
}

pub fn execute(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Synth(a) => {
            let cfg = SynthConfig {
                n_sym: a.n_sym,
                n_herb: a.n_herb,
                n_syndromes: a.n_syndromes,
                n_prescriptions: a.n_prescriptions,
                seed: a.seed,
                p_dim: a.p,
                missing_mol_fraction: a.missing_mol,
                ..SynthConfig::default()
            };
            let corpus = generate_synthetic(&cfg)?;
            io::save_corpus(&a.out, &corpus)?;
            say(out, format!("wrote {} prescriptions to {}", corpus.prescriptions.len(), a.out.display()))
        }
        Command::Prepare => {
            let ws = Workspace::open(config)?;
            let (_, train) = ws.instances("train")?;
            let owned: Vec<Prescription> = train.into_iter().cloned().collect();
            let g = build_graph(ws.corpus.n_sym(), ws.corpus.n_herb(), &owned, ws.cfg.tau_s, ws.cfg.tau_h)?;
            io::save_json(&ws.work("split.json"), &ws.split)?;
            io::save_json(&ws.work("graph.json"), &g)?;
            let (a, b, c) = ws.split.sizes();
            say(out, format!("{} symptoms, {} herbs, {} prescriptions", ws.corpus.n_sym(), ws.corpus.n_herb(), ws.corpus.prescriptions.len()))?;
            say(out, format!("split {a}/{b}/{c}; graph edges ss={} hh={} sh={}", g.edges_ss.len(), g.edges_hh.len(), g.edges_sh.len()))
        }
        Command::TrainRs => train_head(&Workspace::open(config)?, Head::Rs, out),
        Command::TrainSeq => train_head(&Workspace::open(config)?, Head::Seq, out),
        Command::ImputeMol { out: path } => {
            let ws = Workspace::open(config)?;
            let mut m = ws.model()?;
            m.pretrain_molecular()?;
            let imputed = m.imputed()?;
            let mut rows = Vec::new();
            for h in 0..m.mols.n_herb() {
                let (s, l) = m.mols.ranges[h];
                if l == 0 {
                    rows.push((h, -1, imputed.row(h).to_vec()));
                }
                for i in 0..l {
                    rows.push((h, i as i64, m.mols.embeddings.row(s + i).to_vec()));
                }
            }
            let path = path.unwrap_or_else(|| ws.work("molecules_imputed.tsv"));
            io::write_molecular_table(&path, m.mols.d_m(), &rows)?;
            say(out, format!("imputed {} herbs; wrote {}", m.mols.missing().len(), path.display()))
        }
        Command::Recommend { symptoms, k } => {
            let ws = Workspace::open(config)?;
            if k == 0 || k > ws.corpus.n_herb() {
                return Err(Error::Usage(format!("--k must lie in 1..={}", ws.corpus.n_herb())));
            }
            let ids = ws.resolve_symptoms(&symptoms)?;
            let m = ws.restore("rs.ckpt")?;
            for (rank, (h, s)) in m.rs.recommend(&m.store, &ids, k)?.into_iter().enumerate() {
                say(out, format!("{}\t{}\t{s:.4}", rank + 1, ws.corpus.herbs[h].name))?;
            }
            Ok(())
        }
        Command::Generate { symptoms } => {
            let ws = Workspace::open(config)?;
            let ids = ws.resolve_symptoms(&symptoms)?;
            let m = ws.restore("seq.ckpt")?;
            let g = m.generate(&[ids], DecodeOptions::default())?.remove(0);
            let names: Vec<&str> = g.iter().map(|&h| ws.corpus.herbs[h].name.as_str()).collect();
            say(out, names.join(", "))
        }
        Command::Evaluate(a) => {
            let ws = Workspace::open(config)?;
            if a.k.is_empty() || a.k.contains(&0) {
                return Err(Error::Usage("--k values must be >= 1".into()));
            }
            if !a.pred.exists() {
                return Err(Error::MissingArtifact { path: a.pred.clone(), hint: "run train-rs or train-seq first".into() });
            }
            let preds = io::read_predictions(&a.pred)?;
            let (ids, inst) = ws.instances(&a.split)?;
            let mut rows = Vec::with_capacity(ids.len());
            for id in &ids {
                let p = preds.by_instance.get(id).ok_or_else(|| {
                    Error::parse(&a.pred, 0, format!("no prediction for {} instance {id}", a.split))
                })?;
                rows.push(p.clone());
            }
            let model = a.model.clone().unwrap_or_else(|| a.pred.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default());
            let opts = EvalOptions { averaging: if a.micro { Averaging::Micro } else { Averaging::Macro }, classic_for_sequences: a.classic };
            let report = evaluate(&model, &a.split, &inst, &rows, preds.kind, &a.k, &opts)?;
            let path = a.out.clone().unwrap_or_else(|| ws.work(&format!("report_{model}_{}.json", a.split)));
            io::save_report(&path, &report)?;
            say(out, render(&report))
        }
    }
}

/// Table-shaped text rendering of a report.
pub fn render(r: &MetricReport) -> String {
    let mut s = format!("{} on {} ({} instances, {} groups)\n", r.model, r.split, r.n_instances, r.n_groups);
    s.push_str("k\tP\tR\tF1\tBMP\n");
    let f = |x: Option<f64>| x.map(|v| format!("{v:.4}")).unwrap_or_else(|| "-".into());
    for m in &r.metrics {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{:.4}\n", m.k, f(m.precision), f(m.recall), f(m.f1), m.bmp));
    }
    s.pop();
    s
}
