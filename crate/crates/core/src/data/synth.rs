//! Synthetic data from a known generative process.
//!
//! Each class `y` gets a mean `μ_y = separation·N(0, I)` in the concept space
//! and each modality `m` an offset `ν_m = modality_offset·N(0, I)` in the
//! disturbance space. A record draws `z_c* ~ N(μ_y, I)`, `z_m* ~ N(ν_m, I)`
//! and is mapped to features by a fixed random tanh network `g*`. Inputs to
//! `g*` are divided by `τ = sqrt(1 + separation² + modality_offset²)` so the
//! first layer works in the smooth part of tanh.
//!
//! Base classes appear in modality 0 only; novel classes in every modality.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, FeatureRecord};
use crate::error::{GtlError, Result};
use crate::numerics::{Matrix, SeededRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub base_classes: usize,
    pub novel_classes: usize,
    pub modalities: usize,
    pub samples_per_class: usize,
    pub concept_dim: usize,
    pub disturbance_dim: usize,
    pub feature_dim: usize,
    pub separation: f64,
    pub modality_offset: f64,
    /// Number of dense layers in `g*`; every layer but the last is
    /// followed by tanh and is `4·feature_dim` wide.
    pub mixing_depth: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            base_classes: 20,
            novel_classes: 10,
            modalities: 2,
            samples_per_class: 20,
            concept_dim: 8,
            disturbance_dim: 4,
            feature_dim: 32,
            separation: 5.0,
            modality_offset: 3.0,
            mixing_depth: 2,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("base_classes", self.base_classes),
            ("novel_classes", self.novel_classes),
            ("modalities", self.modalities),
            ("samples_per_class", self.samples_per_class),
            ("concept_dim", self.concept_dim),
            ("disturbance_dim", self.disturbance_dim),
            ("feature_dim", self.feature_dim),
            ("mixing_depth", self.mixing_depth),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(GtlError::Validation(format!("synth {name} must be positive")));
            }
        }
        if self.modalities > 256 {
            return Err(GtlError::Validation("synth modalities must fit in a u8".into()));
        }
        for (name, v) in [("separation", self.separation), ("modality_offset", self.modality_offset)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(GtlError::Validation(format!("synth {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// The latents behind each generated record, kept for oracle checks.
#[derive(Clone, Debug)]
pub struct GroundTruthLatents {
    pub class_means: BTreeMap<u32, Vec<f64>>,
    pub modality_offsets: Vec<Vec<f64>>,
    /// `[z_c* | z_m*]` per record, parallel to the split's record lists.
    pub base: Vec<FeatureRecord>,
    pub novel: Vec<FeatureRecord>,
}

struct Mixer {
    layers: Vec<(Matrix, Matrix)>,
    scale: f64,
}

impl Mixer {
    fn new(cfg: &SynthConfig, rng: &mut SeededRng) -> Result<Self> {
        let mut widths = vec![cfg.concept_dim + cfg.disturbance_dim];
        widths.extend(std::iter::repeat_n(4 * cfg.feature_dim, cfg.mixing_depth - 1));
        widths.push(cfg.feature_dim);
        let mut layers = Vec::new();
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let sd = 1.0 / (fan_in as f64).sqrt();
            let w = (0..fan_in * fan_out).map(|_| sd * rng.normal()).collect();
            let last = l + 2 == widths.len();
            let b = (0..fan_out)
                .map(|_| if last { 0.0 } else { 0.5 * rng.normal() })
                .collect();
            layers.push((Matrix::from_vec(fan_in, fan_out, w)?, Matrix::from_vec(1, fan_out, b)?));
        }
        let scale = (1.0 + cfg.separation.powi(2) + cfg.modality_offset.powi(2)).sqrt();
        Ok(Mixer { layers, scale })
    }

    fn apply(&self, z: &Matrix) -> Result<Matrix> {
        let mut h = z.map(|v| v / self.scale);
        let n = self.layers.len();
        for (i, (w, b)) in self.layers.iter().enumerate() {
            h = h.matmul(w)?;
            h.add_row_broadcast(b)?;
            if i + 1 < n {
                h = h.map(f64::tanh);
            }
        }
        Ok(h)
    }
}

fn gaussian_vec(rng: &mut SeededRng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

/// Generates the base/novel split. Base labels are `0..base_classes`,
/// novel labels follow on.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(DatasetSplit, GroundTruthLatents)> {
    cfg.validate()?;
    let root = SeededRng::new(cfg.seed);
    let mut mean_rng = root.derive(1);
    let mut offset_rng = root.derive(2);
    let mut mix_rng = root.derive(3);
    let mut sample_rng = root.derive(4);

    let total_classes = cfg.base_classes + cfg.novel_classes;
    let class_means: BTreeMap<u32, Vec<f64>> = (0..total_classes as u32)
        .map(|c| (c, gaussian_vec(&mut mean_rng, cfg.concept_dim, cfg.separation)))
        .collect();
    let modality_offsets: Vec<Vec<f64>> = (0..cfg.modalities)
        .map(|_| gaussian_vec(&mut offset_rng, cfg.disturbance_dim, cfg.modality_offset))
        .collect();
    let mixer = Mixer::new(cfg, &mut mix_rng)?;

    let mut make = |labels: std::ops::Range<u32>, modalities: usize| -> Result<(Vec<FeatureRecord>, Vec<FeatureRecord>)> {
        let mut latent_rows = Vec::new();
        let mut meta = Vec::new();
        for c in labels {
            for m in 0..modalities {
                for _ in 0..cfg.samples_per_class {
                    let mut z = Vec::with_capacity(cfg.concept_dim + cfg.disturbance_dim);
                    z.extend(class_means[&c].iter().map(|mu| mu + sample_rng.normal()));
                    z.extend(modality_offsets[m].iter().map(|nu| nu + sample_rng.normal()));
                    latent_rows.push(z);
                    meta.push((c, m as u8));
                }
            }
        }
        let zdim = cfg.concept_dim + cfg.disturbance_dim;
        let z = Matrix::from_vec(latent_rows.len(), zdim, latent_rows.concat())?;
        let x = mixer.apply(&z)?;
        let mut feats = Vec::with_capacity(meta.len());
        let mut lats = Vec::with_capacity(meta.len());
        for (i, &(label, modality)) in meta.iter().enumerate() {
            let id = i as u64;
            feats.push(FeatureRecord {
                id,
                feature: x.row(i).iter().map(|&v| v as f32).collect(),
                label,
                modality,
            });
            lats.push(FeatureRecord {
                id,
                feature: z.row(i).iter().map(|&v| v as f32).collect(),
                label,
                modality,
            });
        }
        Ok((feats, lats))
    };

    let nb = cfg.base_classes as u32;
    let (base, base_lat) = make(0..nb, 1)?;
    let (novel, novel_lat) = make(nb..total_classes as u32, cfg.modalities)?;
    let split = DatasetSplit::from_parts(base, novel)?;
    Ok((
        split,
        GroundTruthLatents {
            class_means,
            modality_offsets,
            base: base_lat,
            novel: novel_lat,
        },
    ))
}

#[cfg(test)]
mod tests {
    use statrs::distribution::{ContinuousCDF, StudentsT};

    use super::*;
    use crate::data::encode_features;

    #[test]
    fn sizes_and_labels() {
        let cfg = SynthConfig::default();
        let (split, lat) = synth_generate(&cfg).unwrap();
        assert_eq!(split.base.len(), 20 * 20);
        assert_eq!(split.novel.len(), 10 * 2 * 20);
        assert!(split.base.iter().all(|r| r.modality == 0 && r.label < 20));
        assert!(split.novel.iter().all(|r| r.label >= 20 && r.label < 30));
        assert_eq!(split.novel.iter().filter(|r| r.modality == 1).count(), 200);
        assert!(split.base.iter().all(|r| r.feature.len() == 32 && r.feature.iter().all(|v| v.is_finite())));
        assert_eq!(lat.novel.len(), split.novel.len());
        assert_eq!(lat.novel[5].feature.len(), 12);
    }

    #[test]
    fn same_seed_same_bytes() {
        let cfg = SynthConfig::default();
        let (a, _) = synth_generate(&cfg).unwrap();
        let (b, _) = synth_generate(&cfg).unwrap();
        assert_eq!(encode_features(&a.base).unwrap(), encode_features(&b.base).unwrap());
        assert_eq!(encode_features(&a.novel).unwrap(), encode_features(&b.novel).unwrap());
        let (c, _) = synth_generate(&SynthConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(encode_features(&a.novel).unwrap(), encode_features(&c.novel).unwrap());
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = SynthConfig {
            feature_dim: 0,
            ..Default::default()
        };
        assert!(synth_generate(&cfg).is_err());
        let cfg = SynthConfig {
            separation: -1.0,
            ..Default::default()
        };
        assert!(synth_generate(&cfg).is_err());
    }

    fn nearest(means: &[(u32, Vec<f64>)], z: &[f32]) -> u32 {
        means
            .iter()
            .map(|(c, mu)| {
                let d: f64 = mu.iter().zip(z).map(|(m, &v)| (m - f64::from(v)).powi(2)).sum();
                (d, *c)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
            .1
    }

    #[test]
    fn true_concepts_are_perfectly_separable() {
        let cfg = SynthConfig::default();
        let (_, lat) = synth_generate(&cfg).unwrap();
        let novel_means: Vec<(u32, Vec<f64>)> = lat
            .class_means
            .iter()
            .filter(|(c, _)| **c >= 20)
            .map(|(c, m)| (*c, m.clone()))
            .collect();
        for r in &lat.novel {
            assert_eq!(nearest(&novel_means, &r.feature[..cfg.concept_dim]), r.label);
        }
    }

    /// Largest per-feature Welch t statistic between modality 0 and 1 means,
    /// and the Bonferroni-corrected critical value at α = 0.01.
    fn modality_mean_test(cfg: &SynthConfig) -> (f64, f64) {
        let (split, _) = synth_generate(cfg).unwrap();
        let pick = |m: u8| -> Vec<&FeatureRecord> { split.novel.iter().filter(|r| r.modality == m).collect() };
        let (a, b) = (pick(0), pick(1));
        let stats = |rs: &[&FeatureRecord], j: usize| {
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| f64::from(r.feature[j])).sum::<f64>() / n;
            let var = rs.iter().map(|r| (f64::from(r.feature[j]) - mean).powi(2)).sum::<f64>() / (n - 1.0);
            (mean, var, n)
        };
        let mut worst = 0.0f64;
        for j in 0..cfg.feature_dim {
            let (ma, va, na) = stats(&a, j);
            let (mb, vb, nb) = stats(&b, j);
            worst = worst.max((ma - mb).abs() / (va / na + vb / nb).sqrt());
        }
        let df = (a.len() + b.len() - 2) as f64;
        let alpha = 0.01 / cfg.feature_dim as f64;
        let crit = StudentsT::new(0.0, 1.0, df).unwrap().inverse_cdf(1.0 - alpha / 2.0);
        (worst, crit)
    }

    #[test]
    fn zero_offset_makes_modalities_indistinguishable() {
        let cfg = SynthConfig {
            modality_offset: 0.0,
            ..Default::default()
        };
        let (t, crit) = modality_mean_test(&cfg);
        assert!(t < crit, "t {t} >= {crit}");
        // positive control: the default offset is detected
        let (t, crit) = modality_mean_test(&SynthConfig::default());
        assert!(t > crit, "t {t} <= {crit}");
    }

    #[test]
    fn zero_separation_is_label_uninformative() {
        let cfg = SynthConfig {
            separation: 0.0,
            modality_offset: 0.0,
            base_classes: 1,
            novel_classes: 5,
            samples_per_class: 200,
            ..Default::default()
        };
        let (split, _) = synth_generate(&cfg).unwrap();
        // nearest class mean fitted on even ids, scored on odd ids
        let mut sums: BTreeMap<u32, (Vec<f64>, f64)> = BTreeMap::new();
        for r in split.novel.iter().filter(|r| r.id % 2 == 0) {
            let e = sums.entry(r.label).or_insert((vec![0.0; cfg.feature_dim], 0.0));
            for (s, &v) in e.0.iter_mut().zip(&r.feature) {
                *s += f64::from(v);
            }
            e.1 += 1.0;
        }
        let means: Vec<(u32, Vec<f64>)> = sums
            .into_iter()
            .map(|(c, (s, n))| (c, s.into_iter().map(|v| v / n).collect()))
            .collect();
        let test: Vec<&FeatureRecord> = split.novel.iter().filter(|r| r.id % 2 == 1).collect();
        let correct = test.iter().filter(|r| nearest(&means, &r.feature) == r.label).count();
        let n = test.len() as f64;
        let p = 1.0 / 5.0;
        let acc = correct as f64 / n;
        let sigma = (p * (1.0 - p) / n).sqrt();
        assert!((acc - p).abs() < 3.0 * sigma, "acc {acc} vs chance {p} (σ {sigma})");
    }
}
