//! Corpus records, the symptom/herb co-occurrence graph, dataset splits and
//! synthetic corpora with planted syndrome structure.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::seeded;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymptomRecord {
    pub id: usize,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text_embedding: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HerbRecord {
    pub id: usize,
    pub name: String,
    pub properties: Vec<f64>,
    #[serde(default)]
    pub molecules: Vec<String>,
    /// Precomputed molecule embeddings aligned with `molecules`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mol_embeddings: Option<Vec<Vec<f64>>>,
}

impl HerbRecord {
    pub fn has_molecules(&self) -> bool {
        !self.molecules.is_empty() || self.mol_embeddings.as_ref().is_some_and(|m| !m.is_empty())
    }
}

/// A symptom set paired with an ordered, duplicate-free herb list.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prescription {
    /// Sorted ascending, unique.
    pub symptoms: Vec<usize>,
    /// Source order, first occurrence kept.
    pub herbs: Vec<usize>,
}

impl Prescription {
    /// Canonicalises raw ids: symptoms become a sorted set, duplicate herbs
    /// are dropped keeping the first occurrence.
    pub fn new(symptoms: &[usize], herbs: &[usize]) -> Self {
        let symptoms: Vec<usize> = symptoms.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
        let mut seen = BTreeSet::new();
        let herbs = herbs.iter().copied().filter(|h| seen.insert(*h)).collect();
        Self { symptoms, herbs }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub symptoms: Vec<SymptomRecord>,
    pub herbs: Vec<HerbRecord>,
    pub prescriptions: Vec<Prescription>,
}

impl Corpus {
    pub fn n_sym(&self) -> usize {
        self.symptoms.len()
    }

    pub fn n_herb(&self) -> usize {
        self.herbs.len()
    }

    /// Checks ids, names, property dimension `p_dim`, molecule alignment and
    /// prescription references.
    pub fn validate(&self, p_dim: usize) -> Result<()> {
        let mut names = BTreeSet::new();
        for (i, s) in self.symptoms.iter().enumerate() {
            if s.id != i {
                return Err(Error::schema(format!("symptom '{}'", s.name), format!("id {} is not dense (expected {i})", s.id)));
            }
            if !names.insert(s.name.as_str()) {
                return Err(Error::schema(format!("symptom '{}'", s.name), "duplicate name"));
            }
        }
        let mut names = BTreeSet::new();
        for (i, h) in self.herbs.iter().enumerate() {
            let rec = || format!("herb {} '{}'", h.id, h.name);
            if h.id != i {
                return Err(Error::schema(rec(), format!("id is not dense (expected {i})")));
            }
            if !names.insert(h.name.as_str()) {
                return Err(Error::schema(rec(), "duplicate name"));
            }
            if h.properties.len() != p_dim {
                return Err(Error::schema(
                    rec(),
                    format!("property vector has {} entries, expected {p_dim}", h.properties.len()),
                ));
            }
            if let Some(e) = &h.mol_embeddings {
                if !h.molecules.is_empty() && e.len() != h.molecules.len() {
                    return Err(Error::schema(rec(), "mol_embeddings do not align with molecules"));
                }
            }
        }
        for (i, p) in self.prescriptions.iter().enumerate() {
            let rec = || format!("prescription {i}");
            if p.symptoms.is_empty() || p.herbs.is_empty() {
                return Err(Error::schema(rec(), "empty symptom set or herb list"));
            }
            if let Some(&s) = p.symptoms.iter().find(|&&s| s >= self.n_sym()) {
                return Err(Error::schema(rec(), format!("unknown symptom id {s} (vocabulary has {})", self.n_sym())));
            }
            if let Some(&h) = p.herbs.iter().find(|&&h| h >= self.n_herb()) {
                return Err(Error::schema(rec(), format!("unknown herb id {h} (vocabulary has {})", self.n_herb())));
            }
        }
        Ok(())
    }
}

/// Symptom/herb graph with three undirected edge sets. Symptom `i` has
/// global index `i`, herb `j` has global index `n_sym + j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeteroGraph {
    pub n_sym: usize,
    pub n_herb: usize,
    /// `(a, b)` with `a < b`, symptom ids.
    pub edges_ss: Vec<(usize, usize)>,
    /// `(a, b)` with `a < b`, herb ids.
    pub edges_hh: Vec<(usize, usize)>,
    /// `(symptom, herb)`.
    pub edges_sh: Vec<(usize, usize)>,
    /// Degree of every node over all edge sets, global indexing.
    pub degrees: Vec<usize>,
    pub sub_degrees_ss: Vec<usize>,
    pub sub_degrees_hh: Vec<usize>,
}

impl HeteroGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_sym + self.n_herb
    }

    /// Every edge in global node indices.
    pub fn global_edges(&self) -> Vec<(usize, usize)> {
        let off = self.n_sym;
        self.edges_ss
            .iter()
            .copied()
            .chain(self.edges_hh.iter().map(|&(a, b)| (a + off, b + off)))
            .chain(self.edges_sh.iter().map(|&(s, h)| (s, h + off)))
            .collect()
    }
}

fn count_pairs(groups: impl Iterator<Item = Vec<usize>>) -> BTreeMap<(usize, usize), usize> {
    let mut counts = BTreeMap::new();
    for g in groups {
        for i in 0..g.len() {
            for j in i + 1..g.len() {
                let (a, b) = if g[i] < g[j] { (g[i], g[j]) } else { (g[j], g[i]) };
                if a != b {
                    *counts.entry((a, b)).or_insert(0) += 1;
                }
            }
        }
    }
    counts
}

/// Co-occurrence graph: symptom pairs sharing at least `tau_s`
/// prescriptions, herb pairs co-prescribed at least `tau_h` times, and a
/// symptom-herb edge for every pair seen together once.
pub fn build_graph(
    n_sym: usize,
    n_herb: usize,
    prescriptions: &[Prescription],
    tau_s: usize,
    tau_h: usize,
) -> Result<HeteroGraph> {
    if tau_s == 0 || tau_h == 0 {
        return Err(Error::InvalidArgument("co-occurrence thresholds must be >= 1".into()));
    }
    for (i, p) in prescriptions.iter().enumerate() {
        if p.symptoms.iter().any(|&s| s >= n_sym) || p.herbs.iter().any(|&h| h >= n_herb) {
            return Err(Error::schema(format!("prescription {i}"), "id outside the vocabulary"));
        }
    }
    let dedup = |v: &[usize]| v.iter().copied().collect::<BTreeSet<_>>().into_iter().collect::<Vec<_>>();
    let ss = count_pairs(prescriptions.iter().map(|p| dedup(&p.symptoms)));
    let hh = count_pairs(prescriptions.iter().map(|p| dedup(&p.herbs)));
    let edges_ss: Vec<_> = ss.into_iter().filter(|&(_, c)| c >= tau_s).map(|(e, _)| e).collect();
    let edges_hh: Vec<_> = hh.into_iter().filter(|&(_, c)| c >= tau_h).map(|(e, _)| e).collect();
    let mut sh = BTreeSet::new();
    for p in prescriptions {
        for &s in &p.symptoms {
            for &h in &p.herbs {
                sh.insert((s, h));
            }
        }
    }
    let edges_sh: Vec<_> = sh.into_iter().collect();

    let mut sub_degrees_ss = vec![0; n_sym];
    for &(a, b) in &edges_ss {
        sub_degrees_ss[a] += 1;
        sub_degrees_ss[b] += 1;
    }
    let mut sub_degrees_hh = vec![0; n_herb];
    for &(a, b) in &edges_hh {
        sub_degrees_hh[a] += 1;
        sub_degrees_hh[b] += 1;
    }
    let mut degrees = vec![0; n_sym + n_herb];
    degrees[..n_sym].copy_from_slice(&sub_degrees_ss);
    degrees[n_sym..].copy_from_slice(&sub_degrees_hh);
    for &(s, h) in &edges_sh {
        degrees[s] += 1;
        degrees[n_sym + h] += 1;
    }
    Ok(HeteroGraph { n_sym, n_herb, edges_ss, edges_hh, edges_sh, degrees, sub_degrees_ss, sub_degrees_hh })
}

/// Instance indices of the three partitions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

/// Partition sizes for `n` instances: validation and test sizes are rounded
/// (half away from zero), training takes the remainder.
pub fn split_sizes(n: usize, ratio: [f64; 3]) -> Result<(usize, usize, usize)> {
    if ratio.iter().any(|&r| !(r > 0.0)) || (ratio.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratio {ratio:?} must be positive and sum to 1")));
    }
    if n < 3 {
        return Err(Error::InsufficientData(format!("cannot split {n} instances three ways")));
    }
    let valid = libm::round(ratio[1] * n as f64) as usize;
    let test = libm::round(ratio[2] * n as f64) as usize;
    let train = n.checked_sub(valid + test).ok_or_else(|| Error::InvalidArgument("ratio rounding overflow".into()))?;
    Ok((train, valid, test))
}

/// Seeded uniform shuffle of `0..n` cut into train/valid/test.
pub fn split_dataset(n: usize, ratio: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let (n_train, n_valid, _) = split_sizes(n, ratio)?;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeded(seed, "split"));
    let test = idx.split_off(n_train + n_valid);
    let valid = idx.split_off(n_train);
    Ok(DatasetSplit { train: idx, valid, test, seed })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_sym: usize,
    pub n_herb: usize,
    pub n_syndromes: usize,
    pub n_prescriptions: usize,
    pub seed: u64,
    /// Property vector length.
    pub p_dim: usize,
    /// Symptom text-embedding width; `0` leaves embeddings absent.
    pub d_text: usize,
    /// Fraction of herbs whose molecule list is emptied.
    pub missing_mol_fraction: f64,
    /// Avoid repeating a symptom set across prescriptions while the
    /// presentation space allows it.
    pub distinct_presentations: bool,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_sym: 40,
            n_herb: 60,
            n_syndromes: 5,
            n_prescriptions: 200,
            seed: 7,
            p_dim: 23,
            d_text: 16,
            missing_mol_fraction: 0.2,
            distinct_presentations: true,
        }
    }
}

/// Contiguous blocks of `0..n` of near-equal size.
fn clusters(n: usize, k: usize) -> Vec<Vec<usize>> {
    (0..k).map(|c| (c * n / k..(c + 1) * n / k).collect()).collect()
}

const FRAGMENTS: [&str; 12] = ["C", "O", "N", "CC", "CO", "c1ccccc1", "C(=O)", "S", "Cl", "OC", "C=C", "N(C)"];

/// Synthetic corpus: each syndrome owns a symptom cluster and a herb cluster
/// (contiguous id blocks). A prescription picks one syndrome, 2-4 of its
/// symptoms and 5-10 of its herbs, listed in the syndrome's fixed herb
/// priority order. Herb properties and molecule strings derive from
/// per-syndrome prototypes so that properties and molecular features are
/// correlated.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Corpus> {
    let k = cfg.n_syndromes;
    if k == 0 || k > cfg.n_sym.min(cfg.n_herb) {
        return Err(Error::InvalidArgument(format!(
            "n_syndromes = {k} must be in 1..=min(n_sym, n_herb) = {}",
            cfg.n_sym.min(cfg.n_herb)
        )));
    }
    if cfg.n_sym / k < 2 || cfg.n_herb / k < 5 {
        return Err(Error::InvalidArgument(format!(
            "infeasible clusters: need >= 2 symptoms and >= 5 herbs per syndrome ({} and {} given)",
            cfg.n_sym / k,
            cfg.n_herb / k
        )));
    }
    if !(0.0..=1.0).contains(&cfg.missing_mol_fraction) {
        return Err(Error::InvalidArgument("missing_mol_fraction must lie in [0, 1]".into()));
    }
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let sym_clusters = clusters(cfg.n_sym, k);
    let herb_clusters = clusters(cfg.n_herb, k);

    let mut rng = seeded(cfg.seed, "synth.features");
    let prop_protos: Vec<Vec<f64>> =
        (0..k).map(|_| (0..cfg.p_dim).map(|_| normal.sample(&mut rng)).collect()).collect();
    let text_protos: Vec<Vec<f64>> =
        (0..k).map(|_| (0..cfg.d_text).map(|_| normal.sample(&mut rng)).collect()).collect();
    let mol_bases: Vec<String> = (0..k)
        .map(|_| (0..3).map(|_| FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]).collect())
        .collect();

    let mut symptoms = Vec::with_capacity(cfg.n_sym);
    for (c, members) in sym_clusters.iter().enumerate() {
        for &s in members {
            let text_embedding = (cfg.d_text > 0)
                .then(|| text_protos[c].iter().map(|p| p + 0.5 * normal.sample(&mut rng)).collect());
            symptoms.push(SymptomRecord { id: s, name: format!("sym_{s:03}"), text_embedding });
        }
    }
    let n_missing = libm::round(cfg.missing_mol_fraction * cfg.n_herb as f64) as usize;
    let mut order: Vec<usize> = (0..cfg.n_herb).collect();
    order.shuffle(&mut seeded(cfg.seed, "synth.missing"));
    let missing: BTreeSet<usize> = order[..n_missing].iter().copied().collect();
    let mut herbs = Vec::with_capacity(cfg.n_herb);
    for (c, members) in herb_clusters.iter().enumerate() {
        for &h in members {
            let properties = prop_protos[c].iter().map(|p| p + 0.3 * normal.sample(&mut rng)).collect();
            let n_mol = rng.random_range(1..=4);
            let molecules = (0..n_mol)
                .map(|_| {
                    let mut s = mol_bases[c].clone();
                    for _ in 0..2 {
                        s.push_str(FRAGMENTS[rng.random_range(0..FRAGMENTS.len())]);
                    }
                    s
                })
                .collect();
            let molecules = if missing.contains(&h) { Vec::new() } else { molecules };
            herbs.push(HerbRecord { id: h, name: format!("herb_{h:03}"), properties, molecules, mol_embeddings: None });
        }
    }

    let mut prng = seeded(cfg.seed, "synth.prescriptions");
    let priority: Vec<Vec<usize>> = herb_clusters
        .iter()
        .map(|members| {
            let mut p = members.clone();
            p.shuffle(&mut prng);
            p
        })
        .collect();
    let mut seen = BTreeSet::new();
    let mut prescriptions = Vec::with_capacity(cfg.n_prescriptions);
    for _ in 0..cfg.n_prescriptions {
        let c = prng.random_range(0..k);
        let mut syms = Vec::new();
        for _attempt in 0..64 {
            let n_s = prng.random_range(2..=4).min(sym_clusters[c].len());
            syms = sym_clusters[c].choose_multiple(&mut prng, n_s).copied().collect();
            syms.sort_unstable();
            if !cfg.distinct_presentations || !seen.contains(&syms) {
                break;
            }
        }
        seen.insert(syms.clone());
        let n_h = prng.random_range(5..=10).min(herb_clusters[c].len());
        let chosen: BTreeSet<usize> = herb_clusters[c].choose_multiple(&mut prng, n_h).copied().collect();
        let herbs_ordered: Vec<usize> = priority[c].iter().copied().filter(|h| chosen.contains(h)).collect();
        prescriptions.push(Prescription::new(&syms, &herbs_ordered));
    }
    Ok(Corpus { symptoms, herbs, prescriptions })
}

/// Syndrome index of every symptom and herb under [`generate_synthetic`]'s
/// cluster layout.
pub fn synthetic_clusters(cfg: &SynthConfig) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    (clusters(cfg.n_sym, cfg.n_syndromes), clusters(cfg.n_herb, cfg.n_syndromes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_force_edges(ps: &[Prescription], tau: usize, herbs: bool) -> BTreeSet<(usize, usize)> {
        let mut out = BTreeSet::new();
        let pick = |p: &Prescription| if herbs { p.herbs.clone() } else { p.symptoms.clone() };
        let all: BTreeSet<usize> = ps.iter().flat_map(pick).collect();
        for &a in &all {
            for &b in &all {
                if a < b {
                    let c = ps.iter().filter(|p| pick(p).contains(&a) && pick(p).contains(&b)).count();
                    if c >= tau {
                        out.insert((a, b));
                    }
                }
            }
        }
        out
    }

    #[test]
    fn single_prescription_graph() {
        let p = Prescription::new(&[0, 1], &[0, 1]);
        let g = build_graph(2, 2, &[p], 1, 1).unwrap();
        assert_eq!(g.edges_ss, vec![(0, 1)]);
        assert_eq!(g.edges_hh, vec![(0, 1)]);
        assert_eq!(g.edges_sh, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
        assert_eq!(g.degrees, vec![3, 3, 3, 3]);
    }

    #[test]
    fn graph_matches_brute_force_pair_counting() {
        let corpus = generate_synthetic(&SynthConfig { n_prescriptions: 60, ..SynthConfig::default() }).unwrap();
        for tau in 1..=3 {
            let g = build_graph(40, 60, &corpus.prescriptions, tau, tau).unwrap();
            let ss: BTreeSet<_> = g.edges_ss.iter().copied().collect();
            let hh: BTreeSet<_> = g.edges_hh.iter().copied().collect();
            assert_eq!(ss, brute_force_edges(&corpus.prescriptions, tau, false));
            assert_eq!(hh, brute_force_edges(&corpus.prescriptions, tau, true));
        }
    }

    #[test]
    fn degrees_equal_adjacency_row_sums() {
        let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
        let g = build_graph(40, 60, &corpus.prescriptions, 2, 2).unwrap();
        let mut adj = vec![vec![0usize; g.n_nodes()]; g.n_nodes()];
        for (a, b) in g.global_edges() {
            assert_ne!(a, b, "self-loop stored");
            adj[a][b] = 1;
            adj[b][a] = 1;
        }
        for (v, row) in adj.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), g.degrees[v]);
        }
    }

    #[test]
    fn huge_threshold_removes_homogeneous_edges() {
        let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
        let g = build_graph(40, 60, &corpus.prescriptions, 1000, 1000).unwrap();
        assert!(g.edges_ss.is_empty() && g.edges_hh.is_empty());
        assert!(!g.edges_sh.is_empty());
    }

    #[test]
    fn duplicate_pairs_collapse_to_one_edge() {
        let ps = [Prescription::new(&[1, 0], &[1, 0]), Prescription::new(&[0, 1], &[0, 1])];
        let g = build_graph(2, 2, &ps, 1, 1).unwrap();
        assert_eq!(g.edges_ss, vec![(0, 1)]);
        assert_eq!(g.edges_hh, vec![(0, 1)]);
    }

    #[test]
    fn graph_is_invariant_to_prescription_order() {
        let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
        let mut rev = corpus.prescriptions.clone();
        rev.reverse();
        assert_eq!(
            build_graph(40, 60, &corpus.prescriptions, 2, 2).unwrap(),
            build_graph(40, 60, &rev, 2, 2).unwrap()
        );
    }

    #[test]
    fn zero_threshold_is_rejected() {
        assert!(matches!(build_graph(1, 1, &[], 0, 1), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn dedup_keeps_first_herb_occurrence() {
        let p = Prescription::new(&[3, 1, 3], &[5, 2, 5, 9, 2]);
        assert_eq!(p.symptoms, vec![1, 3]);
        assert_eq!(p.herbs, vec![5, 2, 9]);
    }

    #[test]
    fn split_sizes_follow_ratio() {
        assert_eq!(split_sizes(10, [0.7, 0.1, 0.2]).unwrap(), (7, 1, 2));
        assert_eq!(split_sizes(33_765, [0.7, 0.1, 0.2]).unwrap(), (23_635, 3_377, 6_753));
        assert!(split_sizes(2, [0.7, 0.1, 0.2]).is_err());
        assert!(split_sizes(10, [0.7, 0.1, 0.1]).is_err());
        assert!(split_sizes(10, [1.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn split_is_deterministic_disjoint_and_complete() {
        let a = split_dataset(97, [0.7, 0.1, 0.2], 3).unwrap();
        let b = split_dataset(97, [0.7, 0.1, 0.2], 3).unwrap();
        assert_eq!(a, b);
        let c = split_dataset(97, [0.7, 0.1, 0.2], 4).unwrap();
        assert_ne!(a, c);
        let mut all: Vec<usize> = a.train.iter().chain(&a.valid).chain(&a.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..97).collect::<Vec<_>>());
    }

    #[test]
    fn synthetic_is_deterministic_and_valid() {
        let cfg = SynthConfig::default();
        let a = generate_synthetic(&cfg).unwrap();
        assert_eq!(a, generate_synthetic(&cfg).unwrap());
        a.validate(cfg.p_dim).unwrap();
        assert_eq!(a.prescriptions.len(), 200);
        let (sc, hc) = synthetic_clusters(&cfg);
        for p in &a.prescriptions {
            assert!((2..=4).contains(&p.symptoms.len()));
            assert!((5..=10).contains(&p.herbs.len()));
            let c = sc.iter().position(|m| m.contains(&p.symptoms[0])).unwrap();
            assert!(p.symptoms.iter().all(|s| sc[c].contains(s)));
            assert!(p.herbs.iter().all(|h| hc[c].contains(h)));
        }
        let missing = a.herbs.iter().filter(|h| !h.has_molecules()).count();
        assert_eq!(missing, 12);
    }

    #[test]
    fn single_syndrome_herb_graph_is_connected() {
        let cfg = SynthConfig { n_syndromes: 1, ..SynthConfig::default() };
        let corpus = generate_synthetic(&cfg).unwrap();
        let g = build_graph(40, 60, &corpus.prescriptions, 1, 1).unwrap();
        let used: BTreeSet<usize> = corpus.prescriptions.iter().flat_map(|p| p.herbs.clone()).collect();
        // union-find over herb-herb edges
        let mut parent: Vec<usize> = (0..60).collect();
        fn find(p: &mut [usize], x: usize) -> usize {
            if p[x] != x {
                let r = find(p, p[x]);
                p[x] = r;
            }
            p[x]
        }
        for &(a, b) in &g.edges_hh {
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            parent[ra] = rb;
        }
        let roots: BTreeSet<usize> = used.iter().map(|&h| find(&mut parent, h)).collect();
        assert_eq!(roots.len(), 1);
    }

    #[test]
    fn no_missing_fraction_keeps_all_molecules() {
        let cfg = SynthConfig { missing_mol_fraction: 0.0, ..SynthConfig::default() };
        let corpus = generate_synthetic(&cfg).unwrap();
        assert!(corpus.herbs.iter().all(|h| !h.molecules.is_empty()));
    }

    #[test]
    fn infeasible_synthetic_sizes_error() {
        let cfg = SynthConfig { n_sym: 6, n_syndromes: 5, ..SynthConfig::default() };
        assert!(generate_synthetic(&cfg).is_err());
        let cfg = SynthConfig { n_syndromes: 0, ..SynthConfig::default() };
        assert!(generate_synthetic(&cfg).is_err());
    }

    #[test]
    fn validate_reports_bad_herb_reference_and_property_length() {
        let mut corpus = generate_synthetic(&SynthConfig::default()).unwrap();
        corpus.prescriptions[0].herbs.push(9999);
        assert!(matches!(corpus.validate(23), Err(Error::Schema { .. })));
        let corpus = generate_synthetic(&SynthConfig::default()).unwrap();
        match corpus.validate(27) {
            Err(Error::Schema { record, .. }) => assert!(record.contains("herb_000")),
            other => panic!("expected schema error, got {other:?}"),
        }
    }
}
