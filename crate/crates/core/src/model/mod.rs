//! The network: posterior encoder, gated latent-domain disturbance
//! estimator, aggregator, generator and classifier, with the variational and
//! cross-entropy losses and the checkpoint format.

mod checkpoint;
mod network;
mod params;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use network::{
    aggregate, apply_encoder_running_stats, apply_running_stats, ce_loss, classifier_backward,
    classifier_logits, classify, decode, elbo_backward, elbo_loss, encode, estimate_disturbance,
    forward_full, Ablation, DecodeCache, Disturbance, ElboTerms, EncodeCache, Encoding,
    ForwardOptions, FullForward, LatentSample,
};
pub use params::{GtlParams, ModelDims, AGGREGATOR, CLASSIFIER, DISTURBANCE, ENCODER, GENERATOR};

use crate::error::Result;
use crate::numerics::loss::softmax_ce;
use crate::numerics::{grad_check, GradCheckOptions, GradCheckReport, Matrix, Mode, SeededRng};

/// Settings for [`gradient_suite`].
#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub lambda: f64,
    pub ablation: Ablation,
    pub seed: u64,
    pub check: GradCheckOptions,
    /// Negative control: every analytic gradient entry `g` of the named
    /// tensor is replaced by `1.5·g + 1e-3` before comparison.
    pub corrupt: Option<String>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions {
            lambda: 1.0,
            ablation: Ablation::Full,
            seed: 0,
            check: GradCheckOptions::default(),
            corrupt: None,
        }
    }
}

fn corrupt(groups: &mut [crate::numerics::ParamGroup], target: &Option<String>) {
    if let Some(name) = target {
        for g in groups.iter_mut() {
            for p in &mut g.params {
                if &p.name == name {
                    for g in p.grad.as_mut_slice() {
                        *g = 1.5 * *g + 1e-3;
                    }
                }
            }
        }
    }
}

/// Finite-difference check of the whole model at 64-bit with dropout off.
///
/// Two passes: the negated ELBO against encoder, disturbance, aggregator and
/// generator (train-mode batch norm, reparameterization noise fixed by
/// reseeding), then the cross-entropy against the classifier. Frozen groups
/// are skipped in both. Returns one merged report.
pub fn gradient_suite(
    params: &GtlParams,
    x: &Matrix,
    labels: &[usize],
    opts: &SuiteOptions,
) -> Result<GradCheckReport> {
    let (dims, class_labels, mut groups) = params.clone().into_groups();
    if let Some(name) = &opts.corrupt {
        if !groups.iter().flat_map(|g| &g.params).any(|p| &p.name == name) {
            return Err(crate::GtlError::Validation(format!("no tensor named '{name}'")));
        }
    }
    let cls_frozen = groups[4].frozen;

    // ELBO over the representation groups
    groups[4].frozen = true;
    let fwd_opts = ForwardOptions {
        mode: Mode::Train,
        dropout: 0.0,
        ablation: opts.ablation,
    };
    let elbo = grad_check(
        &mut groups,
        |gs| {
            let mut p = GtlParams::from_groups(dims, class_labels.clone(), gs.to_vec())?;
            p.zero_grad();
            let mut rng = SeededRng::new(opts.seed);
            let fwd = forward_full(&p, x, &fwd_opts, &mut rng)?;
            let terms = elbo_backward(&mut p, x, &fwd, opts.lambda)?;
            let (_, _, mut out) = p.into_groups();
            corrupt(&mut out, &opts.corrupt);
            for (dst, src) in gs.iter_mut().zip(out) {
                for (a, b) in dst.params.iter_mut().zip(src.params) {
                    a.grad = b.grad;
                }
            }
            Ok(terms.total)
        },
        &opts.check,
    )?;

    // cross-entropy over the classifier, on fixed eval-mode features
    let saved: Vec<bool> = groups.iter().map(|g| g.frozen).collect();
    for g in groups.iter_mut().take(4) {
        g.frozen = true;
    }
    groups[4].frozen = cls_frozen;
    let features = {
        let p = GtlParams::from_groups(dims, class_labels.clone(), groups.clone())?;
        match opts.ablation {
            Ablation::NoZ => x.clone(),
            _ => encode(&p, x, Mode::Eval, 0.0, &mut SeededRng::new(opts.seed))?.mu.slice_cols(0, dims.concept),
        }
    };
    let ce = grad_check(
        &mut groups,
        |gs| {
            let mut p = GtlParams::from_groups(dims, class_labels.clone(), gs.to_vec())?;
            p.zero_grad();
            let (logits, hidden) = classifier_logits(&p, &features)?;
            let (loss, dlogits) = softmax_ce(&logits, labels)?;
            classifier_backward(&mut p, &features, &hidden, &dlogits)?;
            let (_, _, mut out) = p.into_groups();
            corrupt(&mut out, &opts.corrupt);
            for (dst, src) in gs.iter_mut().zip(out) {
                for (a, b) in dst.params.iter_mut().zip(src.params) {
                    a.grad = b.grad;
                }
            }
            Ok(loss)
        },
        &opts.check,
    )?;
    for (g, f) in groups.iter_mut().zip(saved) {
        g.frozen = f;
    }

    let mut merged = elbo.clone();
    merged.entries_checked += ce.entries_checked;
    merged.per_param.extend(ce.per_param.iter().cloned());
    if ce.max_rel_err > merged.max_rel_err {
        merged.max_rel_err = ce.max_rel_err;
        merged.worst = ce.worst.clone();
    }
    Ok(merged)
}
