//! Corpus files, molecular tables, embedding and prediction exports.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use fmash_core::data::{Corpus, HerbRecord, Prescription, SymptomRecord};
use fmash_core::metrics::{MetricReport, PredictionKind};
use fmash_core::recsys::RecommendationResult;
use fmash_core::refine::UnifiedEmbeddings;
use fmash_core::tensor::Matrix;

use crate::error::{Error, Result};

pub const SYMPTOMS_FILE: &str = "symptoms.jsonl";
pub const HERBS_FILE: &str = "herbs.jsonl";
pub const PRESCRIPTIONS_FILE: &str = "prescriptions.jsonl";

fn read_lines(path: &Path) -> Result<Vec<(usize, String)>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            out.push((i + 1, line));
        }
    }
    Ok(out)
}

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    read_lines(path)?
        .into_iter()
        .map(|(n, line)| serde_json::from_str(&line).map_err(|e| Error::parse(path, n, e.to_string())))
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?))
}

fn finish(path: &Path, mut w: BufWriter<fs::File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
struct PrescriptionLine {
    symptoms: Vec<usize>,
    herbs: Vec<usize>,
}

/// Reads the three corpus files from `dir` and validates them against the
/// property width `p_dim`.
pub fn load_corpus(dir: &Path, p_dim: usize) -> Result<Corpus> {
    let symptoms: Vec<SymptomRecord> = read_jsonl(&dir.join(SYMPTOMS_FILE))?;
    let herbs: Vec<HerbRecord> = read_jsonl(&dir.join(HERBS_FILE))?;
    let lines: Vec<PrescriptionLine> = read_jsonl(&dir.join(PRESCRIPTIONS_FILE))?;
    let prescriptions = lines.iter().map(|l| Prescription::new(&l.symptoms, &l.herbs)).collect();
    let corpus = Corpus { symptoms, herbs, prescriptions };
    corpus.validate(p_dim)?;
    log::info!(
        "loaded {} symptoms, {} herbs, {} prescriptions from {}",
        corpus.n_sym(),
        corpus.n_herb(),
        corpus.prescriptions.len(),
        dir.display()
    );
    Ok(corpus)
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl Iterator<Item = T>) -> Result<()> {
    let mut w = create(path)?;
    for it in items {
        let line = serde_json::to_string(&it).map_err(|e| Error::parse(path, 0, e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    finish(path, w)
}

pub fn save_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    write_jsonl(&dir.join(SYMPTOMS_FILE), corpus.symptoms.iter())?;
    write_jsonl(&dir.join(HERBS_FILE), corpus.herbs.iter())?;
    write_jsonl(
        &dir.join(PRESCRIPTIONS_FILE),
        corpus.prescriptions.iter().map(|p| PrescriptionLine { symptoms: p.symptoms.clone(), herbs: p.herbs.clone() }),
    )
}

/// Molecule vectors per herb id, in file order.
pub type MolecularTable = BTreeMap<usize, Vec<Vec<f64>>>;

fn parse_header(path: &Path, lines: &[(usize, String)]) -> Result<usize> {
    let (n, first) = lines.first().ok_or_else(|| Error::parse(path, 1, "missing `dim=<d>` header"))?;
    first
        .trim()
        .strip_prefix("dim=")
        .and_then(|d| d.trim().parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| Error::parse(path, *n, format!("expected `dim=<d>` header, found '{first}'")))
}

fn parse_floats(path: &Path, line: usize, field: &str, dim: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = field
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| Error::parse(path, line, format!("bad number '{x}': {e}"))))
        .collect::<Result<_>>()?;
    if v.len() != dim {
        return Err(Error::parse(path, line, format!("vector has {} values, header declares dim={dim}", v.len())));
    }
    Ok(v)
}

/// Reads `dim=<d_m>` then `herb_id<TAB>mol_index<TAB>f1,f2,...` rows.
/// Rows with a negative `mol_index` mark imputed vectors and are skipped.
/// Herb ids must be below `n_herb` when given.
pub fn load_molecular_table(path: &Path, n_herb: Option<usize>) -> Result<(usize, MolecularTable)> {
    let lines = read_lines(path)?;
    let dim = parse_header(path, &lines)?;
    let mut out = MolecularTable::new();
    for (n, line) in &lines[1..] {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::parse(path, *n, "expected herb_id<TAB>mol_index<TAB>values"));
        }
        let herb: usize = parts[0].trim().parse().map_err(|_| Error::parse(path, *n, format!("bad herb id '{}'", parts[0])))?;
        let idx: i64 = parts[1].trim().parse().map_err(|_| Error::parse(path, *n, format!("bad mol_index '{}'", parts[1])))?;
        if let Some(h) = n_herb.filter(|&h| herb >= h) {
            return Err(Error::parse(path, *n, format!("unknown herb id {herb} (vocabulary has {h})")));
        }
        let v = parse_floats(path, *n, parts[2], dim)?;
        if idx >= 0 {
            out.entry(herb).or_default().push(v);
        }
    }
    Ok((dim, out))
}

/// Attaches table vectors to herbs. Herbs that list molecule strings must
/// have exactly that many vectors.
pub fn attach_molecular_table(corpus: &mut Corpus, table: MolecularTable) -> Result<()> {
    for (h, vecs) in table {
        let herb = corpus
            .herbs
            .get_mut(h)
            .ok_or_else(|| Error::Usage(format!("molecular table references unknown herb {h}")))?;
        if herb.molecules.is_empty() {
            herb.molecules = (0..vecs.len()).map(|i| format!("mol_{i}")).collect();
        } else if herb.molecules.len() != vecs.len() {
            return Err(fmash_core::error::Error::Schema {
                record: format!("herb {} '{}'", herb.id, herb.name),
                reason: format!("{} molecules but {} table vectors", herb.molecules.len(), vecs.len()),
            }
            .into());
        }
        herb.mol_embeddings = Some(vecs);
    }
    Ok(())
}

fn join_floats(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

/// One row per molecule vector; `mol_index = -1` marks an imputed vector.
pub fn write_molecular_table(path: &Path, dim: usize, rows: &[(usize, i64, Vec<f64>)]) -> Result<()> {
    let mut w = create(path)?;
    let mut put = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
    put(format!("dim={dim}"))?;
    for (h, i, v) in rows {
        put(format!("{h}\t{i}\t{}", join_floats(v)))?;
    }
    finish(path, w)
}

/// Header `dim=64`, then `sym|herb<TAB>node_id<TAB>f1,...`.
pub fn write_unified(path: &Path, emb: &UnifiedEmbeddings) -> Result<()> {
    let mut w = create(path)?;
    let mut put = |s: String| writeln!(w, "{s}").map_err(|e| Error::io(path, e));
    put(format!("dim={}", emb.sym.cols))?;
    for (kind, m) in [("sym", &emb.sym), ("herb", &emb.herb)] {
        for r in 0..m.rows {
            put(format!("{kind}\t{r}\t{}", join_floats(m.row(r))))?;
        }
    }
    finish(path, w)
}

pub fn read_unified(path: &Path) -> Result<UnifiedEmbeddings> {
    let lines = read_lines(path)?;
    let dim = parse_header(path, &lines)?;
    let (mut sym, mut herb) = (Vec::new(), Vec::new());
    for (n, line) in &lines[1..] {
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(Error::parse(path, *n, "expected node_type<TAB>node_id<TAB>values"));
        }
        let v = parse_floats(path, *n, parts[2], dim)?;
        match parts[0] {
            "sym" => sym.push(v),
            "herb" => herb.push(v),
            other => return Err(Error::parse(path, *n, format!("unknown node type '{other}'"))),
        }
    }
    let m = |rows: Vec<Vec<f64>>| if rows.is_empty() { Matrix::zeros(0, dim) } else { Matrix::from_rows(&rows) };
    Ok(UnifiedEmbeddings { sym: m(sym), herb: m(herb) })
}

/// Per-instance predictions read from an export.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub kind: PredictionKind,
    pub by_instance: BTreeMap<usize, Vec<usize>>,
}

/// Ranked export: `instance_id<TAB>herb:score,...` in descending order.
pub fn write_ranked(path: &Path, rows: &[(usize, RecommendationResult)]) -> Result<()> {
    let mut w = create(path)?;
    for (id, r) in rows {
        let body: Vec<String> = r.ranking.iter().map(|&h| format!("{h}:{:?}", r.scores[h])).collect();
        writeln!(w, "{id}\t{}", body.join(",")).map_err(|e| Error::io(path, e))?;
    }
    finish(path, w)
}

/// Sequence export: `instance_id<TAB>herb,herb,...` in generation order.
pub fn write_sequences(path: &Path, rows: &[(usize, Vec<usize>)]) -> Result<()> {
    let mut w = create(path)?;
    for (id, seq) in rows {
        let body: Vec<String> = seq.iter().map(usize::to_string).collect();
        writeln!(w, "{id}\t{}", body.join(",")).map_err(|e| Error::io(path, e))?;
    }
    finish(path, w)
}

/// Reads either export; entries carrying `:score` mark a ranked file.
pub fn read_predictions(path: &Path) -> Result<Predictions> {
    let mut by_instance = BTreeMap::new();
    let mut kind = None;
    for (n, line) in read_lines(path)? {
        let (id, body) = line.split_once('\t').unwrap_or((line.as_str(), ""));
        let id: usize = id.trim().parse().map_err(|_| Error::parse(path, n, format!("bad instance id '{id}'")))?;
        let mut herbs = Vec::new();
        for item in body.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let (h, ranked) = match item.split_once(':') {
                Some((h, s)) => {
                    s.parse::<f64>().map_err(|_| Error::parse(path, n, format!("bad score in '{item}'")))?;
                    (h, true)
                }
                None => (item, false),
            };
            let k = if ranked { PredictionKind::Ranked } else { PredictionKind::Sequence };
            if *kind.get_or_insert(k) != k {
                return Err(Error::parse(path, n, "mixes ranked and sequence entries"));
            }
            herbs.push(h.parse().map_err(|_| Error::parse(path, n, format!("bad herb id '{h}'")))?);
        }
        if by_instance.insert(id, herbs).is_some() {
            return Err(Error::parse(path, n, format!("duplicate instance {id}")));
        }
    }
    Ok(Predictions { kind: kind.unwrap_or(PredictionKind::Sequence), by_instance })
}

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, 0, e.to_string()))?;
    s.push('\n');
    let mut w = create(path)?;
    w.write_all(s.as_bytes()).map_err(|e| Error::io(path, e))?;
    finish(path, w)
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

pub fn save_report(path: &Path, report: &MetricReport) -> Result<()> {
    save_json(path, report)
}

pub fn load_report(path: &Path) -> Result<MetricReport> {
    load_json(path)
}
