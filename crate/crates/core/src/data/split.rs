//! Base/novel partitioning and the train/val/test sub-split.

use std::collections::BTreeSet;

use super::FeatureRecord;
use crate::error::{GtlError, Result};
use crate::numerics::SeededRng;

/// Base records are all modality 0; the two label sets are disjoint.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub base: Vec<FeatureRecord>,
    pub novel: Vec<FeatureRecord>,
    pub base_labels: BTreeSet<u32>,
    pub novel_labels: BTreeSet<u32>,
}

impl DatasetSplit {
    /// Builds a split from already separated record sets, checking the
    /// invariants.
    pub fn from_parts(base: Vec<FeatureRecord>, novel: Vec<FeatureRecord>) -> Result<Self> {
        if let Some(r) = base.iter().find(|r| r.modality != 0) {
            return Err(GtlError::Validation(format!(
                "base record {} has modality {}, base data must be modality 0",
                r.id, r.modality
            )));
        }
        let base_labels: BTreeSet<u32> = base.iter().map(|r| r.label).collect();
        let novel_labels: BTreeSet<u32> = novel.iter().map(|r| r.label).collect();
        let overlap: Vec<u32> = base_labels.intersection(&novel_labels).copied().collect();
        if !overlap.is_empty() {
            return Err(GtlError::Validation(format!(
                "labels {overlap:?} appear in both base and novel sets"
            )));
        }
        Ok(DatasetSplit {
            base,
            novel,
            base_labels,
            novel_labels,
        })
    }
}

/// Records whose label is in `base_labels` go to the base set, the rest to
/// the novel set.
pub fn split_base_novel(records: Vec<FeatureRecord>, base_labels: &[u32]) -> Result<DatasetSplit> {
    let wanted: BTreeSet<u32> = base_labels.iter().copied().collect();
    let observed: BTreeSet<u32> = records.iter().map(|r| r.label).collect();
    if let Some(l) = wanted.difference(&observed).next() {
        return Err(GtlError::Validation(format!(
            "base label {l} does not occur in the records"
        )));
    }
    let (base, novel) = records.into_iter().partition(|r| wanted.contains(&r.label));
    DatasetSplit::from_parts(base, novel)
}

/// Shuffles and cuts records 60/20/20 into train, validation and test.
pub fn train_val_test(
    mut records: Vec<FeatureRecord>,
    rng: &mut SeededRng,
) -> (Vec<FeatureRecord>, Vec<FeatureRecord>, Vec<FeatureRecord>) {
    rng.shuffle(&mut records);
    let n = records.len();
    let n_train = (n as f64 * 0.6).round() as usize;
    let n_val = ((n as f64 * 0.2).round() as usize).min(n - n_train);
    let test = records.split_off(n_train + n_val);
    let val = records.split_off(n_train);
    (records, val, test)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn rec(id: u64, label: u32, modality: u8) -> FeatureRecord {
        FeatureRecord {
            id,
            feature: vec![id as f32],
            label,
            modality,
        }
    }

    #[test]
    fn disjoint_split_of_four_labels() {
        let recs: Vec<_> = (0..20).map(|i| rec(i, (i % 4) as u32, u8::from(i % 4 >= 2 && i % 3 == 0))).collect();
        let s = split_base_novel(recs, &[0, 1]).unwrap();
        assert_eq!(s.base.len() + s.novel.len(), 20);
        assert_eq!(s.base.len(), 10);
        assert_eq!(s.base_labels, BTreeSet::from([0, 1]));
        assert_eq!(s.novel_labels, BTreeSet::from([2, 3]));
    }

    #[test]
    fn overlap_is_rejected() {
        let base = vec![rec(0, 0, 0), rec(1, 1, 0)];
        let novel = vec![rec(2, 1, 1), rec(3, 2, 0)];
        assert!(matches!(
            DatasetSplit::from_parts(base, novel),
            Err(GtlError::Validation(_))
        ));
    }

    #[test]
    fn multimodal_base_is_rejected() {
        let recs = vec![rec(0, 0, 0), rec(1, 0, 1), rec(2, 1, 1)];
        assert!(split_base_novel(recs, &[0]).is_err());
    }

    #[test]
    fn unknown_base_label_is_rejected() {
        let recs = vec![rec(0, 0, 0), rec(1, 1, 1)];
        assert!(split_base_novel(recs, &[5]).is_err());
    }

    proptest! {
        #[test]
        fn sub_split_proportions(n in 0usize..400, seed in any::<u64>()) {
            let recs: Vec<_> = (0..n as u64).map(|i| rec(i, 0, 0)).collect();
            let (tr, va, te) = train_val_test(recs, &mut SeededRng::new(seed));
            prop_assert_eq!(tr.len() + va.len() + te.len(), n);
            let nf = n as f64;
            prop_assert!((tr.len() as f64 - 0.6 * nf).abs() <= 1.0);
            prop_assert!((va.len() as f64 - 0.2 * nf).abs() <= 1.0);
            prop_assert!((te.len() as f64 - 0.2 * nf).abs() <= 1.0);
            let mut ids: Vec<u64> = tr.iter().chain(&va).chain(&te).map(|r| r.id).collect();
            ids.sort_unstable();
            prop_assert_eq!(ids, (0..n as u64).collect::<Vec<_>>());
        }
    }
}
