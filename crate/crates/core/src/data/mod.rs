//! Feature records, the `GTLF` file format, base/novel splits, few-shot
//! episode sampling and the synthetic generative benchmark.

mod codec;
mod episode;
mod split;
mod synth;

pub use codec::{
    decode_features, encode_features, load_features, load_label_names, sidecar_path,
    write_features, write_label_names, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use episode::{sample_episode, Episode, Protocol};
pub use split::{split_base_novel, train_val_test, DatasetSplit};
pub use synth::{synth_generate, GroundTruthLatents, SynthConfig};

use crate::error::{GtlError, Result};
use crate::numerics::Matrix;

/// One backbone feature vector with its class and modality.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: u64,
    pub feature: Vec<f32>,
    pub label: u32,
    /// 0 is the base modality.
    pub modality: u8,
}

/// Stacks record features into a `records × dim` matrix.
pub fn feature_matrix<'a, I>(records: I) -> Result<Matrix>
where
    I: IntoIterator<Item = &'a FeatureRecord>,
{
    let mut data = Vec::new();
    let mut rows = 0;
    let mut dim = None;
    for r in records {
        match dim {
            None => dim = Some(r.feature.len()),
            Some(d) if d != r.feature.len() => {
                return Err(GtlError::dim(
                    "feature_matrix",
                    format!("record {} has {} features, expected {d}", r.id, r.feature.len()),
                ))
            }
            _ => {}
        }
        data.extend(r.feature.iter().map(|&v| f64::from(v)));
        rows += 1;
    }
    Matrix::from_vec(rows, dim.unwrap_or(0), data)
}

/// Distinct labels in ascending order.
pub fn label_set(records: &[FeatureRecord]) -> Vec<u32> {
    let mut ls: Vec<u32> = records.iter().map(|r| r.label).collect();
    ls.sort_unstable();
    ls.dedup();
    ls
}
