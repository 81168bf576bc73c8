//! Ranking metrics on held-out feedback, multi-seed aggregation and a
//! paired t-test.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dataio::{InteractionDataset, Split};
use crate::error::{Error, Result};

/// DCG with unit gains and `1 / log2(rank + 1)` discounts, normalised by the
/// ideal DCG over `min(k, |relevant|)` positions. Zero when nothing is relevant.
pub fn ndcg_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() || k == 0 {
        return 0.0;
    }
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, item)| relevant.contains(item))
        .map(|(pos, _)| 1.0 / ((pos + 2) as f64).log2())
        .sum();
    let ideal: f64 = (0..k.min(relevant.len())).map(|pos| 1.0 / ((pos + 2) as f64).log2()).sum();
    dcg / ideal
}

pub fn recall_at_k(ranked: &[usize], relevant: &HashSet<usize>, k: usize) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let hits = ranked.iter().take(k).filter(|i| relevant.contains(i)).count();
    hits as f64 / relevant.len() as f64
}

/// Orders `(item, score)` pairs by score descending, ties by item ascending.
pub fn rank_by_score(scored: &mut [(usize, f64)]) -> Vec<usize> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.iter().map(|(i, _)| *i).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub k: usize,
    pub ndcg: f64,
    pub recall: f64,
    pub users_evaluated: usize,
    pub users_skipped: usize,
}

/// Ranks each user's own items in `split` by `score(user, item)` and averages
/// NDCG@k / Recall@k over users with at least one positive label.
pub fn evaluate<F>(score: F, dataset: &InteractionDataset, split: Split, k: usize) -> Result<EvalResult>
where
    F: Fn(usize, usize) -> f64 + Sync,
{
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    let by_user = dataset.items_by_user(split);
    if by_user.iter().all(Vec::is_empty) {
        return Err(Error::Evaluation(format!("split '{}' is empty", split.as_str())));
    }
    let mut ndcg = 0.0;
    let mut recall = 0.0;
    let mut evaluated = 0;
    let mut skipped = 0;
    for (user, items) in by_user.iter().enumerate() {
        if items.is_empty() {
            continue;
        }
        let relevant: HashSet<usize> = items.iter().filter(|(_, l)| *l == 1).map(|(i, _)| *i).collect();
        if relevant.is_empty() {
            skipped += 1;
            continue;
        }
        let mut scored: Vec<(usize, f64)> = items.iter().map(|&(i, _)| (i, score(user, i))).collect();
        let ranked = rank_by_score(&mut scored);
        ndcg += ndcg_at_k(&ranked, &relevant, k);
        recall += recall_at_k(&ranked, &relevant, k);
        evaluated += 1;
    }
    if evaluated == 0 {
        return Err(Error::Evaluation("no user has a positive item in the split".into()));
    }
    Ok(EvalResult {
        k,
        ndcg: ndcg / evaluated as f64,
        recall: recall / evaluated as f64,
        users_evaluated: evaluated,
        users_skipped: skipped,
    })
}

/// Two-sided paired t-test p-value.
///
/// Zero-variance differences give `p = 1` when their mean is zero and
/// `p = 0` otherwise.
pub fn paired_t_test(runs_a: &[f64], runs_b: &[f64]) -> Result<f64> {
    if runs_a.len() != runs_b.len() {
        return Err(Error::config("paired samples must have equal length"));
    }
    let n = runs_a.len();
    if n < 2 {
        return Err(Error::config("paired t-test needs at least two pairs"));
    }
    let d: Vec<f64> = runs_a.iter().zip(runs_b).map(|(a, b)| a - b).collect();
    let (mean, sd) = mean_std(&d);
    if sd == 0.0 || !sd.is_finite() {
        return Ok(if mean == 0.0 { 1.0 } else { 0.0 });
    }
    let t = mean / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).map_err(|e| Error::Numerical(e.to_string()))?;
    Ok((2.0 * dist.sf(t.abs())).min(1.0))
}

/// Mean and sample standard deviation (n − 1 denominator; 0 for n < 2).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub ndcg_at_k: f64,
    pub recall_at_k: f64,
    #[serde(default)]
    pub users_evaluated: usize,
    #[serde(default)]
    pub users_skipped: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricPair {
    pub ndcg: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub dataset: String,
    pub k: usize,
    pub per_seed: Vec<SeedMetrics>,
    pub mean: MetricPair,
    pub std: MetricPair,
    pub users_evaluated: usize,
    pub users_skipped: usize,
    pub p_value_vs_baseline: Option<MetricPair>,
}

impl MetricsReport {
    pub fn from_seeds(method: &str, dataset: &str, k: usize, mut per_seed: Vec<SeedMetrics>) -> Result<Self> {
        if per_seed.is_empty() {
            return Err(Error::config("report needs at least one seed"));
        }
        per_seed.sort_by_key(|s| s.seed);
        let nd: Vec<f64> = per_seed.iter().map(|s| s.ndcg_at_k).collect();
        let rc: Vec<f64> = per_seed.iter().map(|s| s.recall_at_k).collect();
        let (mn, sn) = mean_std(&nd);
        let (mr, sr) = mean_std(&rc);
        Ok(Self {
            method: method.into(),
            dataset: dataset.into(),
            k,
            users_evaluated: per_seed[0].users_evaluated,
            users_skipped: per_seed[0].users_skipped,
            per_seed,
            mean: MetricPair { ndcg: mn, recall: mr },
            std: MetricPair { ndcg: sn, recall: sr },
            p_value_vs_baseline: None,
        })
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.per_seed.iter().map(|s| s.seed).collect()
    }

    /// Paired t-test against `baseline`; both reports must cover the same seeds.
    pub fn compare_to(&mut self, baseline: &MetricsReport) -> Result<MetricPair> {
        if self.seeds() != baseline.seeds() {
            return Err(Error::config(format!(
                "seed sets differ between '{}' and '{}'",
                self.method, baseline.method
            )));
        }
        let pick = |r: &MetricsReport, f: fn(&SeedMetrics) -> f64| r.per_seed.iter().map(f).collect::<Vec<_>>();
        let p = MetricPair {
            ndcg: paired_t_test(&pick(self, |s| s.ndcg_at_k), &pick(baseline, |s| s.ndcg_at_k))?,
            recall: paired_t_test(&pick(self, |s| s.recall_at_k), &pick(baseline, |s| s.recall_at_k))?,
        };
        self.p_value_vs_baseline = Some(p);
        Ok(p)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("seed,ndcg_at_k,recall_at_k\n");
        for r in &self.per_seed {
            s.push_str(&format!("{},{},{}\n", r.seed, r.ndcg_at_k, r.recall_at_k));
        }
        s.push_str(&format!("mean,{},{}\n", self.mean.ndcg, self.mean.recall));
        s.push_str(&format!("std,{},{}\n", self.std.ndcg, self.std.recall));
        if let Some(p) = self.p_value_vs_baseline {
            s.push_str(&format!("p_value,{},{}\n", p.ndcg, p.recall));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{split, test_support::toy, Origin};

    fn set(xs: &[usize]) -> HashSet<usize> {
        xs.iter().copied().collect()
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[7, 1, 2], &set(&[7]), 5), 1.0);
        assert!((ndcg_at_k(&[1, 2, 7, 3], &set(&[7]), 5) - 0.5).abs() < 1e-15);
        assert_eq!(ndcg_at_k(&[4, 9, 1], &set(&[4, 9]), 5), 1.0);
        assert_eq!(ndcg_at_k(&[1, 2], &set(&[]), 5), 0.0);
    }

    #[test]
    fn recall_examples() {
        assert_eq!(recall_at_k(&[1, 2, 3], &set(&[1, 3]), 5), 1.0);
        assert_eq!(recall_at_k(&[1, 2, 3, 4, 5, 6, 7, 8], &set(&[5, 6, 7, 8]), 5), 0.25);
        assert_eq!(recall_at_k(&[1, 2, 3, 4, 5, 6], &set(&[6]), 5), 0.0);
    }

    #[test]
    fn ties_break_by_item_id() {
        let mut s = vec![(5, 1.0), (2, 1.0), (9, 3.0)];
        assert_eq!(rank_by_score(&mut s), vec![9, 2, 5]);
    }

    #[test]
    fn t_test_cases() {
        let a = [0.5, 0.6, 0.7];
        assert_eq!(paired_t_test(&a, &a).unwrap(), 1.0);
        let p = paired_t_test(&[2.0, 3.0, 4.0, 5.0], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert!(p < 1e-12);
        // reference values from scipy.stats.ttest_rel
        let a = [12.1, 14.3, 11.8, 13.0, 12.7, 15.2];
        let b = [11.5, 13.9, 12.0, 12.2, 12.1, 14.1];
        assert!((paired_t_test(&a, &b).unwrap() - 0.027_387_619_710_575_71).abs() < 1e-6);
        let a = [0.5973, 0.6012, 0.5881, 0.6100, 0.5930, 0.5874, 0.6055, 0.5990, 0.5902, 0.6021];
        let b = [0.5546, 0.5601, 0.5512, 0.5660, 0.5580, 0.5490, 0.5623, 0.5551, 0.5530, 0.5589];
        let p = paired_t_test(&a, &b).unwrap();
        assert!((p - 2.943_308_000_777_697_4e-11).abs() < 1e-6 * 1e-11 + 1e-16);
        assert!(paired_t_test(&[1.0], &[0.0]).is_err());
    }

    fn eval_fixture() -> InteractionDataset {
        let mut recs = vec![(0, 0, 4.0, Origin::Biased)];
        for item in 0..10 {
            let value = if item == 3 { 5.0 } else { 1.0 };
            recs.push((0, item, value, Origin::Unbiased));
        }
        recs.push((1, 0, 1.0, Origin::Unbiased));
        let d = crate::dataio::binarize(toy(&recs, 2, 10), 4.0);
        let mut d = split(d, 0.01, 0).unwrap();
        for r in &mut d.records {
            if r.origin == Origin::Unbiased {
                r.split = Some(Split::Test);
            }
        }
        d
    }

    #[test]
    fn evaluate_perfect_model_and_skips() {
        let d = eval_fixture();
        let r = evaluate(|_, i| if i == 3 { 1.0 } else { 0.0 }, &d, Split::Test, 5).unwrap();
        assert_eq!((r.ndcg, r.recall), (1.0, 1.0));
        assert_eq!(r.users_evaluated, 1);
        assert_eq!(r.users_skipped, 1);
        assert!(matches!(evaluate(|_, _| 0.0, &d, Split::Val, 5), Err(Error::Evaluation(_))));
    }

    #[test]
    fn evaluate_averages_over_positions_like_enumeration() {
        // place the single positive at every rank 1..=10 in turn
        let d = eval_fixture();
        let mut total = 0.0;
        for rank in 0..10usize {
            let r = evaluate(
                |_, i| {
                    if i == 3 {
                        0.5 - rank as f64
                    } else {
                        -(if i < 3 { i } else { i - 1 } as f64)
                    }
                },
                &d,
                Split::Test,
                5,
            )
            .unwrap();
            total += r.ndcg;
        }
        let expected: f64 = (1..=5).map(|r: i32| 1.0 / ((r + 1) as f64).log2()).sum::<f64>() / 10.0;
        assert!((total / 10.0 - expected).abs() < 1e-12);
    }

    #[test]
    fn report_stats_and_seed_mismatch() {
        let mk = |seed, n| SeedMetrics { seed, ndcg_at_k: n, recall_at_k: n, users_evaluated: 1, users_skipped: 0 };
        let a = MetricsReport::from_seeds("a", "d", 5, vec![mk(0, 0.5), mk(1, 0.7)]).unwrap();
        assert!((a.mean.ndcg - 0.6).abs() < 1e-12);
        assert!((a.std.ndcg - 0.02f64.sqrt()).abs() < 1e-12);
        let mut b = MetricsReport::from_seeds("b", "d", 5, vec![mk(0, 0.5), mk(2, 0.7)]).unwrap();
        assert!(b.compare_to(&a).is_err());
        let mut c = a.clone();
        assert_eq!(c.compare_to(&a).unwrap().ndcg, 1.0);
    }
}
