//! Top-K precision, recall and F1, plus best matched precision over groups
//! of test instances that share an input.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::data::Prescription;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Scores the first `k` entries of `ranked` against `truth`. Short
/// predictions keep `k` as the divisor.
pub fn topk_metrics(ranked: &[usize], truth: &[usize], k: usize) -> Result<TopK> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let t: BTreeSet<usize> = truth.iter().copied().collect();
    if t.is_empty() {
        return Err(Error::InvalidArgument("empty ground-truth set".into()));
    }
    let prefix: BTreeSet<usize> = ranked.iter().take(k).copied().collect();
    let hits = prefix.intersection(&t).count() as f64;
    let precision = hits / k as f64;
    let recall = hits / t.len() as f64;
    Ok(TopK { precision, recall, f1: f1(precision, recall) })
}

/// Best matched precision: the highest P@k of `prediction` against any
/// ground truth of the group.
pub fn bmp_at_k(prediction: &[usize], truths: &[&[usize]], k: usize) -> Result<f64> {
    if truths.is_empty() {
        return Err(Error::InvalidArgument("empty evaluation group".into()));
    }
    let mut best = 0.0f64;
    for t in truths {
        best = best.max(topk_metrics(prediction, t, k)?.precision);
    }
    Ok(best)
}

/// Test instances sharing one canonical symptom set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalGroup {
    pub key: Vec<usize>,
    /// Indices into the evaluated instance list.
    pub members: Vec<usize>,
}

/// Groups instances by sorted unique symptom ids, in order of first
/// appearance.
pub fn group_instances(instances: &[&Prescription]) -> Vec<EvalGroup> {
    let mut index: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut groups: Vec<EvalGroup> = Vec::new();
    for (i, p) in instances.iter().enumerate() {
        let mut key = p.symptoms.clone();
        key.sort_unstable();
        key.dedup();
        match index.get(&key) {
            Some(&g) => groups[g].members.push(i),
            None => {
                index.insert(key.clone(), groups.len());
                groups.push(EvalGroup { key, members: alloc::vec![i] });
            }
        }
    }
    groups
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Macro,
    Micro,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionKind {
    /// A full ranking from the set head.
    #[default]
    Ranked,
    /// A generated formula in generation order.
    Sequence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMetrics {
    pub k: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub precision: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub f1: Option<f64>,
    pub bmp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub split: String,
    pub kind: PredictionKind,
    pub averaging: Averaging,
    pub ks: Vec<usize>,
    pub metrics: Vec<KMetrics>,
    pub n_instances: usize,
    pub n_groups: usize,
}

impl MetricReport {
    pub fn at(&self, k: usize) -> Option<&KMetrics> {
        self.metrics.iter().find(|m| m.k == k)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct EvalOptions {
    pub averaging: Averaging,
    /// Also report P/R/F1 for sequence predictions.
    pub classic_for_sequences: bool,
}

/// Scores one prediction per instance. The group prediction used for BMP is
/// that of the group's first instance.
pub fn evaluate(
    model: &str,
    split: &str,
    instances: &[&Prescription],
    predictions: &[Vec<usize>],
    kind: PredictionKind,
    ks: &[usize],
    opts: &EvalOptions,
) -> Result<MetricReport> {
    if predictions.len() != instances.len() {
        return Err(Error::InvalidArgument(alloc::format!(
            "{} predictions for {} instances",
            predictions.len(),
            instances.len()
        )));
    }
    if instances.is_empty() {
        return Err(Error::InsufficientData("no instances to evaluate".into()));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::InvalidArgument("ks must be non-empty and >= 1".into()));
    }
    let groups = group_instances(instances);
    let classic = kind == PredictionKind::Ranked || opts.classic_for_sequences;
    let mut metrics = Vec::with_capacity(ks.len());
    for &k in ks {
        let mut bmp = 0.0;
        for g in &groups {
            let truths: Vec<&[usize]> = g.members.iter().map(|&i| instances[i].herbs.as_slice()).collect();
            bmp += bmp_at_k(&predictions[g.members[0]], &truths, k)?;
        }
        bmp /= groups.len() as f64;
        let mut m = KMetrics { k, precision: None, recall: None, f1: None, bmp };
        if classic {
            let n = instances.len() as f64;
            match opts.averaging {
                Averaging::Macro => {
                    let mut acc = TopK::default();
                    for (p, inst) in predictions.iter().zip(instances) {
                        let t = topk_metrics(p, &inst.herbs, k)?;
                        acc.precision += t.precision;
                        acc.recall += t.recall;
                        acc.f1 += t.f1;
                    }
                    m.precision = Some(acc.precision / n);
                    m.recall = Some(acc.recall / n);
                    m.f1 = Some(acc.f1 / n);
                }
                Averaging::Micro => {
                    let (mut hits, mut truth) = (0.0, 0.0);
                    for (p, inst) in predictions.iter().zip(instances) {
                        let t = topk_metrics(p, &inst.herbs, k)?;
                        hits += t.precision * k as f64;
                        truth += inst.herbs.len() as f64;
                    }
                    let p = hits / (k as f64 * n);
                    let r = hits / truth;
                    m.precision = Some(p);
                    m.recall = Some(r);
                    m.f1 = Some(f1(p, r));
                }
            }
        }
        metrics.push(m);
    }
    Ok(MetricReport {
        model: model.into(),
        split: split.into(),
        kind,
        averaging: opts.averaging,
        ks: ks.to_vec(),
        metrics,
        n_instances: instances.len(),
        n_groups: groups.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use alloc::vec;
    use rand::seq::{IndexedRandom, SliceRandom};
    use rand::Rng;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn two_hits_out_of_eight() {
        let m = topk_metrics(&[1, 2, 30, 31, 32, 3], &[1, 2, 3, 4, 5, 6, 7, 8], 5).unwrap();
        assert!(close(m.precision, 0.4));
        assert!(close(m.recall, 0.25));
        let oracle = 2.0 * 0.4 * 0.25 / (0.4 + 0.25);
        assert!(close(m.f1, oracle));
        assert!((m.f1 - 0.3077).abs() < 1e-4);
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        assert_eq!(topk_metrics(&[9, 8], &[1, 2], 2).unwrap(), TopK::default());
        assert!(topk_metrics(&[1], &[], 1).is_err());
        assert!(topk_metrics(&[1], &[1], 0).is_err());
    }

    #[test]
    fn short_predictions_keep_k_as_divisor() {
        let m = topk_metrics(&[1, 2], &[1, 2, 3], 5).unwrap();
        assert!(close(m.precision, 0.4));
    }

    #[test]
    fn bmp_takes_the_best_ground_truth() {
        let pred = [1, 2, 3, 4, 5];
        let a = [1, 10, 11, 12, 13];
        let b = [5, 4, 3, 2, 1];
        assert!(close(bmp_at_k(&pred, &[&a], 5).unwrap(), 0.2));
        assert!(close(bmp_at_k(&pred, &[&a, &b], 5).unwrap(), 1.0));
        assert!(bmp_at_k(&pred, &[], 5).is_err());
    }

    #[test]
    fn groups_use_sorted_unique_symptoms() {
        let ps = [Prescription::new(&[2, 1], &[0]), Prescription::new(&[3], &[1]), Prescription::new(&[1, 2, 2], &[2])];
        let refs: Vec<&Prescription> = ps.iter().collect();
        let g = group_instances(&refs);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].key, vec![1, 2]);
        assert_eq!(g[0].members, vec![0, 2]);
    }

    #[test]
    fn perfect_run_scores_one() {
        let ps = [Prescription::new(&[0], &[3, 4, 5, 6, 7]), Prescription::new(&[1], &[1, 2, 8, 9, 0])];
        let refs: Vec<&Prescription> = ps.iter().collect();
        let preds: Vec<Vec<usize>> = ps.iter().map(|p| p.herbs.clone()).collect();
        let r = evaluate("m", "test", &refs, &preds, PredictionKind::Ranked, &[1, 5], &EvalOptions::default()).unwrap();
        for m in &r.metrics {
            assert_eq!((m.precision, m.bmp), (Some(1.0), 1.0));
        }
        let s = evaluate("m", "test", &refs, &preds, PredictionKind::Sequence, &[5], &EvalOptions::default()).unwrap();
        assert_eq!(s.metrics[0].precision, None);
        assert!(evaluate("m", "t", &refs, &preds[..1], PredictionKind::Ranked, &[5], &EvalOptions::default()).is_err());
    }

    #[test]
    fn micro_averaging_pools_hits() {
        let ps = [Prescription::new(&[0], &[1, 2]), Prescription::new(&[1], &[3, 4, 5, 6])];
        let refs: Vec<&Prescription> = ps.iter().collect();
        let preds = vec![vec![1, 9], vec![3, 4]];
        let opts = EvalOptions { averaging: Averaging::Micro, ..EvalOptions::default() };
        let r = evaluate("m", "t", &refs, &preds, PredictionKind::Ranked, &[2], &opts).unwrap();
        // 3 hits over 4 slots and 6 truths
        assert!(close(r.metrics[0].precision.unwrap(), 0.75));
        assert!(close(r.metrics[0].recall.unwrap(), 0.5));
    }

    #[test]
    fn random_predictions_match_the_hypergeometric_expectation() {
        let n_herb = 60;
        let k = 5;
        let mut rng = seeded(11, "metrics");
        let all: Vec<usize> = (0..n_herb).collect();
        let mut ps = Vec::new();
        let mut preds = Vec::new();
        for i in 0..400 {
            let size = rng.random_range(3..12);
            let t: Vec<usize> = all.choose_multiple(&mut rng, size).copied().collect();
            ps.push(Prescription::new(&[i], &t));
            let mut p = all.clone();
            p.shuffle(&mut rng);
            preds.push(p);
        }
        let refs: Vec<&Prescription> = ps.iter().collect();
        let r = evaluate("rand", "t", &refs, &preds, PredictionKind::Ranked, &[k], &EvalOptions::default()).unwrap();
        let (nf, kf) = (n_herb as f64, k as f64);
        let mut mean = 0.0;
        let mut var = 0.0;
        for p in &ps {
            let m = p.herbs.len() as f64;
            mean += m / nf;
            var += kf * (m / nf) * (1.0 - m / nf) * (nf - kf) / (nf - 1.0) / (kf * kf);
        }
        let n = ps.len() as f64;
        let (mean, sd) = (mean / n, libm::sqrt(var) / n);
        let got = r.metrics[0].precision.unwrap();
        assert!((got - mean).abs() <= 3.0 * sd, "{got} vs {mean} ± {sd}");
    }

    #[test]
    fn bounds_and_order_invariance() {
        let mut rng = seeded(5, "metrics");
        for _ in 0..500 {
            let truth: Vec<usize> = (0..rng.random_range(1..8)).map(|_| rng.random_range(0..15)).collect();
            let pred: Vec<usize> = (0..15).filter(|_| rng.random_bool(0.5)).collect();
            let k = rng.random_range(1..10);
            let m = topk_metrics(&pred, &truth, k).unwrap();
            for v in [m.precision, m.recall, m.f1] {
                assert!((0.0..=1.0).contains(&v));
            }
            if m.precision + m.recall > 0.0 {
                assert!(m.f1 >= m.precision.min(m.recall) - 1e-15 && m.f1 <= m.precision.max(m.recall) + 1e-15);
            }
            let mut rev = truth.clone();
            rev.reverse();
            assert_eq!(topk_metrics(&pred, &rev, k).unwrap(), m);
            let mut tail = pred.clone();
            tail.extend([99, 98]);
            assert_eq!(topk_metrics(&tail[..pred.len().min(k)], &truth, k).unwrap(), m);
        }
    }
}
