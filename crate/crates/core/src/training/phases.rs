//! Phase 1 (base training), Phase 2 (adaptation) and prediction.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use serde::Serialize;

use super::config::{TrainConfig, TrainMode};
use crate::data::{feature_matrix, FeatureRecord};
use crate::error::{GtlError, Result};
use crate::model::{
    apply_running_stats, classifier_backward, classifier_logits, elbo_backward, encode,
    forward_full, Ablation, ForwardOptions, GtlParams, ModelDims,
};
use crate::numerics::loss::softmax_ce;
use crate::numerics::optim::Fnv64;
use crate::numerics::{adam_step, AdamState, Matrix, Mode, SeededRng};

/// Losses of one epoch, averaged over samples.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_recon: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_ce: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PhaseReport {
    /// Representation stage, one record per epoch. Empty when the stage was
    /// skipped.
    pub representation: Vec<EpochRecord>,
    pub classifier: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
    /// Digest of every parameter group after the phase.
    pub checksum: u64,
}

fn jsonl(records: &[EpochRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("epoch records serialize"));
        out.push('\n');
    }
    out
}

impl PhaseReport {
    pub fn representation_jsonl(&self) -> String {
        jsonl(&self.representation)
    }

    pub fn classifier_jsonl(&self) -> String {
        jsonl(&self.classifier)
    }
}

pub fn params_checksum(params: &GtlParams) -> u64 {
    let mut h = Fnv64::new();
    for g in params.groups() {
        h.write(&g.checksum().to_le_bytes());
    }
    h.finish()
}

/// Index batches for one epoch: a fresh shuffle cut into `batch` chunks.
fn batches(n: usize, batch: usize, rng: &mut SeededRng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

/// Optimizes encoder, disturbance, aggregator and (unless frozen) generator
/// on the negated ELBO.
fn train_representation(
    params: &mut GtlParams,
    x: &Matrix,
    cfg: &TrainConfig,
    ablation: Ablation,
    epochs: usize,
    rng: &SeededRng,
) -> Result<Vec<EpochRecord>> {
    let mut shuffle_rng = rng.derive(1);
    let mut noise_rng = rng.derive(2);
    let mut states: Vec<AdamState> = params.groups()[..4]
        .iter()
        .map(|g| AdamState::new(g, cfg.lr_repr, cfg.weight_decay))
        .collect();
    let opts = ForwardOptions {
        mode: Mode::Train,
        dropout: cfg.dropout,
        ablation,
    };
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        let lr = cfg.lr_at(cfg.lr_repr, epoch, epochs);
        for s in &mut states {
            s.lr = lr;
        }
        let (mut total, mut recon, mut kl) = (0.0, 0.0, 0.0);
        for idx in batches(x.rows(), cfg.batch_size, &mut shuffle_rng) {
            let xb = x.select_rows(&idx);
            params.zero_grad();
            let fwd = forward_full(params, &xb, &opts, &mut noise_rng)?;
            let terms = elbo_backward(params, &xb, &fwd, cfg.lambda)?;
            apply_running_stats(params, &fwd);
            for (g, s) in params.groups_mut().into_iter().zip(&mut states) {
                if !g.frozen {
                    adam_step(g, s);
                }
            }
            let w = idx.len() as f64;
            total += terms.total * w;
            recon += terms.recon * w;
            kl += terms.kl * w;
        }
        let n = x.rows() as f64;
        curve.push(EpochRecord {
            epoch,
            loss_total: total / n,
            loss_recon: Some(recon / n),
            loss_kl: Some(kl / n),
            loss_ce: None,
            lr,
        });
    }
    Ok(curve)
}

/// What the classifier reads: the posterior mean of `z_c`, or the raw
/// features when the latent path is ablated.
pub fn classifier_features(params: &GtlParams, x: &Matrix, ablation: Ablation) -> Result<Matrix> {
    match ablation {
        Ablation::NoZ => Ok(x.clone()),
        _ => {
            // eval mode draws nothing from the stream
            let enc = encode(params, x, Mode::Eval, 0.0, &mut SeededRng::new(0))?;
            Ok(enc.mu.slice_cols(0, params.dims.concept))
        }
    }
}

/// Fresh classifier for `labels`, trained with every other group frozen.
fn train_classifier(
    params: &mut GtlParams,
    x: &Matrix,
    labels: &[u32],
    cfg: &TrainConfig,
    ablation: Ablation,
    rng: &SeededRng,
) -> Result<Vec<EpochRecord>> {
    let classes: Vec<u32> = labels.iter().copied().collect::<BTreeSet<_>>().into_iter().collect();
    let index: BTreeMap<u32, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let targets: Vec<usize> = labels.iter().map(|l| index[l]).collect();
    params.reset_classifier(classifier_input(params.dims, ablation), classes, &mut rng.derive(3))?;

    let saved: Vec<bool> = params.groups().iter().map(|g| g.frozen).collect();
    for g in params.groups_mut().into_iter().take(4) {
        g.frozen = true;
    }
    let features = classifier_features(params, x, ablation)?;
    let mut state = AdamState::new(&params.classifier, cfg.lr_cls, cfg.weight_decay);
    let mut shuffle_rng = rng.derive(4);
    let epochs = cfg.classifier_epochs;
    let mut curve = Vec::with_capacity(epochs);
    for epoch in 1..=epochs {
        state.lr = cfg.lr_at(cfg.lr_cls, epoch, epochs);
        let mut total = 0.0;
        for idx in batches(features.rows(), cfg.batch_size, &mut shuffle_rng) {
            let fb = features.select_rows(&idx);
            let yb: Vec<usize> = idx.iter().map(|&i| targets[i]).collect();
            params.classifier.zero_grad();
            let (logits, hidden) = classifier_logits(params, &fb)?;
            let (loss, dlogits) = softmax_ce(&logits, &yb)?;
            classifier_backward(params, &fb, &hidden, &dlogits)?;
            adam_step(&mut params.classifier, &mut state);
            total += loss * idx.len() as f64;
        }
        let ce = total / features.rows() as f64;
        curve.push(EpochRecord {
            epoch,
            loss_total: ce,
            loss_recon: None,
            loss_kl: None,
            loss_ce: Some(ce),
            lr: state.lr,
        });
    }
    for (g, f) in params.groups_mut().into_iter().zip(saved) {
        g.frozen = f;
    }
    Ok(curve)
}

fn classifier_input(dims: ModelDims, ablation: Ablation) -> usize {
    match ablation {
        Ablation::NoZ => dims.input,
        _ => dims.concept,
    }
}

fn fresh_params(dims: ModelDims, ablation: Ablation, rng: &mut SeededRng) -> Result<GtlParams> {
    GtlParams::init_with_classifier_input(dims, classifier_input(dims, ablation), rng)
}

fn check_features(records: &[FeatureRecord], dims_input: usize, what: &str) -> Result<()> {
    if records.is_empty() {
        return Err(GtlError::Validation(format!("{what} set is empty")));
    }
    if let Some(r) = records.iter().find(|r| r.feature.len() != dims_input) {
        return Err(GtlError::dim(
            "training",
            format!(
                "{what} record {} has {} features, model input is {dims_input}",
                r.id,
                r.feature.len()
            ),
        ));
    }
    Ok(())
}

/// Phase 1: the representation on the negated ELBO over the base set, then
/// a fresh classifier for the base classes with the representation frozen.
pub fn train_phase1(
    base: &[FeatureRecord],
    cfg: &TrainConfig,
    rng: &SeededRng,
) -> Result<(GtlParams, PhaseReport)> {
    cfg.validate()?;
    check_features(base, cfg.dims.input, "base")?;
    let modalities: BTreeSet<u8> = base.iter().map(|r| r.modality).collect();
    if modalities.len() > 1 {
        return Err(GtlError::Validation(format!(
            "base data must hold a single modality, found {modalities:?}"
        )));
    }
    let start = Instant::now();
    let ablation = cfg.mode.ablation();
    let mut params = fresh_params(cfg.dims, ablation, &mut rng.derive(10))?;
    let x = feature_matrix(base)?;
    let labels: Vec<u32> = base.iter().map(|r| r.label).collect();
    let representation = train_representation(&mut params, &x, cfg, ablation, cfg.epochs, &rng.derive(11))?;
    let classifier = train_classifier(&mut params, &x, &labels, cfg, ablation, &rng.derive(12))?;
    params.zero_grad();
    let checksum = params_checksum(&params);
    Ok((
        params,
        PhaseReport {
            representation,
            classifier,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            checksum,
        },
    ))
}

/// Phase 2: adapts to the support set. The generator stays frozen unless
/// the mode fine-tunes it; `gtl_t` discards `params` and starts from a
/// fresh initialization. The classifier is always re-initialized for the
/// support classes.
///
/// `params.class_labels` must still be the base classes: support labels
/// that overlap them are rejected.
pub fn adapt_phase2(
    params: &GtlParams,
    support: &[FeatureRecord],
    cfg: &TrainConfig,
    rng: &SeededRng,
) -> Result<(GtlParams, PhaseReport)> {
    cfg.validate()?;
    params.dims.check_compatible(&cfg.dims)?;
    check_features(support, params.dims.input, "support")?;
    let base: BTreeSet<u32> = params.class_labels.iter().copied().collect();
    let clash: BTreeSet<u32> = support.iter().map(|r| r.label).filter(|l| base.contains(l)).collect();
    if !clash.is_empty() {
        return Err(GtlError::Validation(format!(
            "support labels {clash:?} are base classes; base and novel labels must be disjoint"
        )));
    }
    let start = Instant::now();
    let ablation = cfg.mode.ablation();
    let mut adapted = if cfg.mode == TrainMode::GtlT {
        fresh_params(params.dims, ablation, &mut rng.derive(20))?
    } else {
        params.clone()
    };
    for g in adapted.groups_mut() {
        g.frozen = false;
    }
    adapted.generator.frozen = cfg.mode.freezes_generator();
    // nothing of the base classifier is carried over
    let classes: Vec<u32> = support.iter().map(|r| r.label).collect::<BTreeSet<_>>().into_iter().collect();
    adapted.reset_classifier(classifier_input(adapted.dims, ablation), classes, &mut rng.derive(23))?;

    let x = feature_matrix(support)?;
    let labels: Vec<u32> = support.iter().map(|r| r.label).collect();
    let representation =
        train_representation(&mut adapted, &x, cfg, ablation, cfg.adapt_epochs, &rng.derive(21))?;
    let classifier = train_classifier(&mut adapted, &x, &labels, cfg, ablation, &rng.derive(22))?;
    adapted.zero_grad();
    let checksum = params_checksum(&adapted);
    Ok((
        adapted,
        PhaseReport {
            representation,
            classifier,
            wall_clock_secs: start.elapsed().as_secs_f64(),
            checksum,
        },
    ))
}

/// Labels for each row of `x`: argmax of the classifier on the posterior
/// mean (or on `x` itself for the `no_z` ablation).
pub fn predict(params: &GtlParams, x: &Matrix, ablation: Ablation) -> Result<Vec<u32>> {
    let features = classifier_features(params, x, ablation)?;
    let (logits, _) = classifier_logits(params, &features)?;
    Ok(logits
        .argmax_rows()
        .into_iter()
        .map(|i| params.class_labels[i])
        .collect())
}
