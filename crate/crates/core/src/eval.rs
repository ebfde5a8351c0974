//! Top-1 accuracy, overall and per modality, and aggregation over episodes.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{GtlError, Result};

/// Correct and total query counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub correct: usize,
    pub total: usize,
}

impl Counts {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    /// Micro average: all correct queries over all queries.
    pub acc_mixed: f64,
    /// Only modalities that have queries appear.
    pub acc_per_modality: BTreeMap<u8, f64>,
    pub episode_count: usize,
    pub counts: Counts,
    pub counts_per_modality: BTreeMap<u8, Counts>,
}

impl EvalResult {
    /// Query-count-weighted combination of the per-modality accuracies.
    ///
    /// Each `n_m · acc_m` is within half a unit of the integer correct count
    /// it came from, so rounding recovers it and the combination is exact.
    pub fn weighted_modality_combination(&self) -> f64 {
        let mut correct = 0.0;
        let mut total = 0.0;
        for (m, acc) in &self.acc_per_modality {
            let n = self.counts_per_modality[m].total as f64;
            correct += (n * acc).round();
            total += n;
        }
        correct / total
    }
}

pub fn top1_accuracy(preds: &[u32], labels: &[u32], modalities: &[u8]) -> Result<EvalResult> {
    if preds.len() != labels.len() || preds.len() != modalities.len() {
        return Err(GtlError::dim(
            "top1_accuracy",
            format!(
                "{} predictions, {} labels, {} modalities",
                preds.len(),
                labels.len(),
                modalities.len()
            ),
        ));
    }
    if preds.is_empty() {
        return Err(GtlError::Validation("accuracy over zero queries".into()));
    }
    let mut counts = Counts::default();
    let mut per: BTreeMap<u8, Counts> = BTreeMap::new();
    for ((p, l), m) in preds.iter().zip(labels).zip(modalities) {
        let hit = usize::from(p == l);
        counts.correct += hit;
        counts.total += 1;
        let c = per.entry(*m).or_default();
        c.correct += hit;
        c.total += 1;
    }
    Ok(EvalResult {
        acc_mixed: counts.accuracy(),
        acc_per_modality: per.iter().map(|(m, c)| (*m, c.accuracy())).collect(),
        episode_count: 1,
        counts,
        counts_per_modality: per,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
    /// Half-width of the normal-approximation 95% interval of the mean.
    pub ci95: f64,
    pub n: usize,
}

/// Mean, standard deviation and 95% interval. Values are sorted before
/// summing so the result does not depend on their order.
pub fn summarize(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(GtlError::Validation("cannot summarize zero episodes".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() < 2 {
        0.0
    } else {
        let mut sq: Vec<f64> = v.iter().map(|x| (x - mean).powi(2)).collect();
        sq.sort_by(f64::total_cmp);
        (sq.iter().sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(Summary {
        mean,
        std,
        ci95: 1.96 * std / n.sqrt(),
        n: v.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpisodeSummary {
    pub mixed: Summary,
    /// Over the episodes that had queries in that modality.
    pub per_modality: BTreeMap<u8, Summary>,
    pub episode_count: usize,
    pub pooled: Counts,
}

pub fn aggregate_episodes(results: &[EvalResult]) -> Result<EpisodeSummary> {
    let mixed: Vec<f64> = results.iter().map(|r| r.acc_mixed).collect();
    let mixed = summarize(&mixed)?;
    let mut by_mod: BTreeMap<u8, Vec<f64>> = BTreeMap::new();
    let mut pooled = Counts::default();
    let mut episodes = 0;
    for r in results {
        for (m, a) in &r.acc_per_modality {
            by_mod.entry(*m).or_default().push(*a);
        }
        pooled.correct += r.counts.correct;
        pooled.total += r.counts.total;
        episodes += r.episode_count;
    }
    let per_modality = by_mod
        .into_iter()
        .map(|(m, v)| summarize(&v).map(|s| (m, s)))
        .collect::<Result<_>>()?;
    Ok(EpisodeSummary {
        mixed,
        per_modality,
        episode_count: episodes,
        pooled,
    })
}

pub const CSV_HEADER: &str = "setting,k,acc_mixed,acc_m0,acc_m1,std,ci95";

/// One metrics row. A modality without queries leaves its column empty.
pub fn csv_row(setting: &str, k: usize, s: &EpisodeSummary) -> String {
    let modality = |m: u8| {
        s.per_modality
            .get(&m)
            .map_or(String::new(), |x| format!("{:.6}", x.mean))
    };
    let mut row = String::new();
    write!(
        row,
        "{setting},{k},{:.6},{},{},{:.6},{:.6}",
        s.mixed.mean,
        modality(0),
        modality(1),
        s.mixed.std,
        s.mixed.ci95
    )
    .expect("writing to a String cannot fail");
    row
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn all_correct() {
        let r = top1_accuracy(&[1, 2, 3], &[1, 2, 3], &[0, 1, 1]).unwrap();
        assert_eq!(r.acc_mixed, 1.0);
        assert!(r.acc_per_modality.values().all(|&a| a == 1.0));
    }

    #[test]
    fn hand_counted_mixed_case() {
        let r = top1_accuracy(&[4, 9], &[4, 4], &[0, 1]).unwrap();
        assert_eq!(r.acc_mixed, 0.5);
        assert_eq!(r.acc_per_modality[&0], 1.0);
        assert_eq!(r.acc_per_modality[&1], 0.0);
    }

    #[test]
    fn empty_bucket_is_omitted() {
        let r = top1_accuracy(&[1, 1], &[1, 2], &[1, 1]).unwrap();
        assert!(!r.acc_per_modality.contains_key(&0));
        assert_eq!(r.acc_per_modality.len(), 1);
    }

    #[test]
    fn length_mismatch_and_empty() {
        assert!(top1_accuracy(&[1], &[1, 2], &[0, 0]).is_err());
        assert!(top1_accuracy(&[], &[], &[]).is_err());
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[0.7]).unwrap();
        assert_eq!((s.mean, s.std, s.ci95), (0.7, 0.0, 0.0));
        assert_eq!(summarize(&[0.3, 0.3]).unwrap().std, 0.0);
        assert_eq!(summarize(&[0.4, 0.6]).unwrap().mean, 0.5);
        assert!(summarize(&[]).is_err());
        assert!(aggregate_episodes(&[]).is_err());
    }

    #[test]
    fn csv_layout() {
        let a = top1_accuracy(&[1, 2], &[1, 1], &[0, 0]).unwrap();
        let s = aggregate_episodes(&[a]).unwrap();
        assert_eq!(csv_row("full/all-way", 5, &s), "full/all-way,5,0.500000,0.500000,,0.000000,0.000000");
        assert_eq!(CSV_HEADER.split(',').count(), csv_row("x", 1, &s).split(',').count());
    }

    fn fixture() -> impl Strategy<Value = (Vec<u32>, Vec<u32>, Vec<u8>)> {
        (1usize..300).prop_flat_map(|n| {
            (
                prop::collection::vec(0u32..4, n),
                prop::collection::vec(0u32..4, n),
                prop::collection::vec(0u8..3, n),
            )
        })
    }

    proptest! {
        #[test]
        fn mixed_is_weighted_modality_combination((p, l, m) in fixture()) {
            let r = top1_accuracy(&p, &l, &m).unwrap();
            prop_assert_eq!(r.weighted_modality_combination(), r.acc_mixed);
            let float_form: f64 = r.acc_per_modality.iter()
                .map(|(k, a)| r.counts_per_modality[k].total as f64 * a)
                .sum::<f64>() / r.counts.total as f64;
            prop_assert!((float_form - r.acc_mixed).abs() <= 2.0 * f64::EPSILON);
        }

        #[test]
        fn aggregation_ignores_order(mut v in prop::collection::vec(0.0f64..1.0, 1..40), seed in any::<u64>()) {
            let a = summarize(&v).unwrap();
            crate::numerics::SeededRng::new(seed).shuffle(&mut v);
            prop_assert_eq!(summarize(&v).unwrap(), a);
        }
    }
}
