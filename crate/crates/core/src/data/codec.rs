//! `GTLF` feature files.
//!
//! ```text
//! "GTLF"  u32 version=1  u32 count  u32 dim
//! count × ( u32 label  u8 modality  f32 × dim )
//! ```
//!
//! Little-endian throughout. Record ids are their position in the file.
//! An optional JSON sidecar `<file>.labels.json` maps label ids to names.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::FeatureRecord;
use crate::binio::ByteReader;
use crate::error::{GtlError, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"GTLF";
pub const FEATURE_VERSION: u32 = 1;

/// Serializes records; all must share one feature dimension.
pub fn encode_features(records: &[FeatureRecord]) -> Result<Vec<u8>> {
    let dim = records.first().map_or(0, |r| r.feature.len());
    if let Some(r) = records.iter().find(|r| r.feature.len() != dim) {
        return Err(GtlError::dim(
            "encode_features",
            format!("record {} has {} features, expected {dim}", r.id, r.feature.len()),
        ));
    }
    let count = u32::try_from(records.len())
        .map_err(|_| GtlError::Validation("too many records for a GTLF file".into()))?;
    let mut out = Vec::with_capacity(16 + records.len() * (5 + 4 * dim));
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    for r in records {
        out.extend_from_slice(&r.label.to_le_bytes());
        out.push(r.modality);
        for v in &r.feature {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<Vec<FeatureRecord>> {
    let mut r = ByteReader::new(bytes);
    if r.take(4, "magic")? != FEATURE_MAGIC {
        return Err(GtlError::Format {
            offset: 0,
            detail: "bad magic, expected GTLF".into(),
        });
    }
    let version = r.u32("version")?;
    if version != FEATURE_VERSION {
        return Err(GtlError::Format {
            offset: 4,
            detail: format!("unsupported feature file version {version}"),
        });
    }
    let count = r.u32("record count")? as usize;
    let dim = r.u32("feature dim")? as usize;
    let record_bytes = 5 + 4 * dim;
    if count.checked_mul(record_bytes) != Some(r.remaining()) {
        let expected = count as u128 * record_bytes as u128;
        let detail = if (r.remaining() as u128) < expected {
            format!("truncated: header declares {count} records of {record_bytes} bytes, {} bytes present", r.remaining())
        } else {
            format!("{} bytes after {count} declared records", r.remaining() as u128 - expected)
        };
        return r.fail(detail);
    }
    let mut out = Vec::with_capacity(count);
    for id in 0..count {
        let label = r.u32("label")?;
        let modality = r.u8("modality")?;
        let mut feature = Vec::with_capacity(dim);
        for _ in 0..dim {
            let at = r.offset();
            let v = r.f32("feature")?;
            if !v.is_finite() {
                return Err(GtlError::Format {
                    offset: at,
                    detail: format!("non-finite feature in record {id}"),
                });
            }
            feature.push(v);
        }
        out.push(FeatureRecord {
            id: id as u64,
            feature,
            label,
            modality,
        });
    }
    r.expect_end()?;
    Ok(out)
}

pub fn write_features(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    let bytes = encode_features(records)?;
    let mut f = fs::File::create(path).map_err(GtlError::file(path))?;
    f.write_all(&bytes).map_err(GtlError::file(path))?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureRecord>> {
    decode_features(&fs::read(path).map_err(GtlError::file(path))?)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".labels.json");
    PathBuf::from(s)
}

pub fn write_label_names(path: &Path, names: &BTreeMap<u32, String>) -> Result<()> {
    fs::write(sidecar_path(path), serde_json::to_string_pretty(names)?)?;
    Ok(())
}

/// Reads the sidecar next to `path`, if there is one.
pub fn load_label_names(path: &Path) -> Result<Option<BTreeMap<u32, String>>> {
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&fs::read_to_string(side)?)?))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn empty_payload() {
        let bytes = encode_features(&[]).unwrap();
        assert_eq!(bytes.len(), 16);
        assert!(decode_features(&bytes).unwrap().is_empty());
    }

    #[test]
    fn hand_built_two_record_file() {
        let mut b = Vec::new();
        b.extend_from_slice(b"GTLF");
        b.extend_from_slice(&[1, 0, 0, 0]); // version
        b.extend_from_slice(&[2, 0, 0, 0]); // count
        b.extend_from_slice(&[3, 0, 0, 0]); // dim
        b.extend_from_slice(&[7, 0, 0, 0]); // label 7
        b.push(0); // modality 0
        b.extend_from_slice(&[0x00, 0x00, 0x80, 0x3f]); // 1.0
        b.extend_from_slice(&[0x00, 0x00, 0x00, 0xc0]); // -2.0
        b.extend_from_slice(&[0x00, 0x00, 0x00, 0x3f]); // 0.5
        b.extend_from_slice(&[0x2c, 0x01, 0x00, 0x00]); // label 300
        b.push(1); // modality 1
        b.extend_from_slice(&[0x00, 0x00, 0x00, 0x00]); // 0.0
        b.extend_from_slice(&[0x00, 0x00, 0x20, 0x41]); // 10.0
        b.extend_from_slice(&[0x00, 0x00, 0x80, 0xbe]); // -0.25
        let recs = decode_features(&b).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!((recs[0].id, recs[0].label, recs[0].modality), (0, 7, 0));
        assert_eq!(recs[0].feature, vec![1.0, -2.0, 0.5]);
        assert_eq!((recs[1].id, recs[1].label, recs[1].modality), (1, 300, 1));
        assert_eq!(recs[1].feature, vec![0.0, 10.0, -0.25]);
        assert_eq!(encode_features(&recs).unwrap(), b);
    }

    #[test]
    fn format_errors_report_offsets() {
        let recs = vec![FeatureRecord {
            id: 0,
            feature: vec![1.0, 2.0],
            label: 1,
            modality: 0,
        }];
        let good = encode_features(&recs).unwrap();

        let mut bad = good.clone();
        bad[3] = b'X';
        assert!(matches!(decode_features(&bad), Err(GtlError::Format { offset: 0, .. })));

        let mut bad = good.clone();
        bad[4] = 2;
        assert!(matches!(decode_features(&bad), Err(GtlError::Format { offset: 4, .. })));

        match decode_features(&good[..good.len() - 1]) {
            Err(GtlError::Format { offset, detail }) => {
                assert_eq!(offset, 16);
                assert!(detail.contains("truncated"));
            }
            other => panic!("{other:?}"),
        }

        let mut bad = good.clone();
        bad[16 + 5..16 + 9].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_features(&bad), Err(GtlError::Format { offset: 21, .. })));
    }

    #[test]
    fn sidecar_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.gtlf");
        assert!(load_label_names(&path).unwrap().is_none());
        let names: BTreeMap<u32, String> = [(0, "cat".to_string()), (9, "dog".to_string())].into();
        write_label_names(&path, &names).unwrap();
        assert_eq!(load_label_names(&path).unwrap(), Some(names));
    }

    fn arb_records() -> impl Strategy<Value = Vec<FeatureRecord>> {
        (0usize..6).prop_flat_map(|dim| {
            prop::collection::vec(
                (
                    any::<u32>(),
                    any::<u8>(),
                    prop::collection::vec(
                        any::<f32>().prop_filter("finite", |v| v.is_finite()),
                        dim,
                    ),
                ),
                0..20,
            )
            .prop_map(|rows| {
                rows.into_iter()
                    .enumerate()
                    .map(|(i, (label, modality, feature))| FeatureRecord {
                        id: i as u64,
                        feature,
                        label,
                        modality,
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(recs in arb_records()) {
            let bytes = encode_features(&recs).unwrap();
            let back = decode_features(&bytes).unwrap();
            prop_assert_eq!(back.len(), recs.len());
            for (a, b) in back.iter().zip(&recs) {
                prop_assert_eq!(a.label, b.label);
                prop_assert_eq!(a.modality, b.modality);
                let ab: Vec<u32> = a.feature.iter().map(|v| v.to_bits()).collect();
                let bb: Vec<u32> = b.feature.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(ab, bb);
            }
            prop_assert_eq!(encode_features(&back).unwrap(), bytes);
        }
    }
}
