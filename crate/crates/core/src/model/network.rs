//! Forward and backward passes of the network.
//!
//! ```text
//! x ─ dense→BN→ReLU→dropout ─ h ─┬─ μ, logσ² ─ reparam ─ z = [z_c | z_m]
//!                                 └─ gate(h) ⊙ experts(h) ─ û
//! z_m' = aggregate([û | z_m])
//! x̂    = generator([z_c | z_m'])
//! ŷ    = softmax(classifier(z_c))
//! ```

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::params::{batchnorm_of, idx, GtlParams};
use crate::error::{GtlError, Result};
use crate::numerics::layers::{
    batchnorm_backward, batchnorm_forward, dense_backward, dense_forward, dropout_backward,
    dropout_forward, relu_backward, relu_forward, BnCache,
};
use crate::numerics::loss::{
    clamp_logvar, clamp_logvar_backward, gaussian_kl, gaussian_kl_backward, reparameterize,
    reparameterize_backward, softmax_ce, softmax_rows, squared_error, squared_error_backward,
};
use crate::numerics::{Matrix, Mode, ParamGroup, SeededRng};

/// Which parts of the latent structure are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// No latent variables: the classifier reads the raw features.
    NoZ,
    /// No disturbance path: the generator sees `[z_c | 0]`.
    NoZm,
}

impl FromStr for Ablation {
    type Err = GtlError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_z" => Ok(Ablation::NoZ),
            "no_zm" => Ok(Ablation::NoZm),
            other => Err(GtlError::Validation(format!("unknown ablation '{other}'"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Full => "full",
            Ablation::NoZ => "no_z",
            Ablation::NoZm => "no_zm",
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    pub dropout: f64,
    pub ablation: Ablation,
}

impl ForwardOptions {
    pub fn eval(ablation: Ablation) -> Self {
        ForwardOptions {
            mode: Mode::Eval,
            dropout: 0.0,
            ablation,
        }
    }
}

/// Latent quantities produced by one forward pass.
#[derive(Clone, Debug)]
pub struct LatentSample {
    pub hidden: Matrix,
    pub mu: Matrix,
    pub logvar: Matrix,
    pub z_c: Matrix,
    pub z_m: Matrix,
    /// Gated expert combination; `None` when the disturbance path is off.
    pub u_hat: Option<Matrix>,
    pub z_m_prime: Matrix,
    pub gates: Option<Matrix>,
}

#[derive(Clone, Debug)]
pub struct EncodeCache {
    x: Matrix,
    bn: BnCache,
    post_bn: Matrix,
    mask: Option<Matrix>,
    logvar_raw: Matrix,
    eps: Option<Matrix>,
    bn_stats: Option<(Matrix, Matrix)>,
}

/// Output of [`encode`]: the posterior and its sample.
#[derive(Clone, Debug)]
pub struct Encoding {
    pub hidden: Matrix,
    pub mu: Matrix,
    pub logvar: Matrix,
    pub z_c: Matrix,
    pub z_m: Matrix,
    pub cache: EncodeCache,
}

fn bn_mode(mode: Mode, batch: usize) -> Mode {
    // a single sample has no batch variance
    if mode == Mode::Train && batch < 2 {
        Mode::Eval
    } else {
        mode
    }
}

/// Posterior estimator. Train mode samples `z` by reparameterization; eval
/// mode returns `z = μ`.
pub fn encode(
    params: &GtlParams,
    x: &Matrix,
    mode: Mode,
    dropout: f64,
    rng: &mut SeededRng,
) -> Result<Encoding> {
    let d = &params.dims;
    if x.cols() != d.input {
        return Err(GtlError::dim(
            "encode",
            format!("input has {} features, model expects {}", x.cols(), d.input),
        ));
    }
    let g = &params.encoder;
    let pre_bn = dense_forward(x, &g.params[idx::ENC_W].value, &g.params[idx::ENC_B].value)?;
    let bn = batchnorm_of(g, idx::ENC_GAMMA, idx::ENC_BETA);
    let (post_bn, bn_cache, bn_stats) = batchnorm_forward(&pre_bn, &bn, bn_mode(mode, x.rows()))?;
    let act = relu_forward(&post_bn);
    let (hidden, mask) = dropout_forward(&act, dropout, mode, rng)?;

    let mu = dense_forward(&hidden, &g.params[idx::MU_W].value, &g.params[idx::MU_B].value)?;
    let logvar_raw = dense_forward(&hidden, &g.params[idx::LV_W].value, &g.params[idx::LV_B].value)?;
    let logvar = clamp_logvar(&logvar_raw);
    let (z, eps) = match mode {
        Mode::Train => {
            let r = reparameterize(&mu, &logvar, rng)?;
            (r.z, Some(r.eps))
        }
        Mode::Eval => (mu.clone(), None),
    };
    Ok(Encoding {
        hidden,
        z_c: z.slice_cols(0, d.concept),
        z_m: z.slice_cols(d.concept, d.latent()),
        mu,
        logvar,
        cache: EncodeCache {
            x: x.clone(),
            bn: bn_cache,
            post_bn,
            mask,
            logvar_raw,
            eps,
            bn_stats,
        },
    })
}

/// Gated mixture of the latent-domain expert maps.
#[derive(Clone, Debug)]
pub struct Disturbance {
    pub u_hat: Matrix,
    pub gates: Matrix,
    /// All expert outputs side by side, `B × (d·Nm)`.
    pub experts: Matrix,
}

/// `û[b] = Σ_j softmax(gate(h))[b,j] · V_j(h[b])`.
pub fn estimate_disturbance(params: &GtlParams, hidden: &Matrix) -> Result<Disturbance> {
    let d = &params.dims;
    let g = &params.disturbance;
    if hidden.cols() != d.hidden {
        return Err(GtlError::dim(
            "estimate_disturbance",
            format!("hidden width {} vs {}", hidden.cols(), d.hidden),
        ));
    }
    let logits = dense_forward(hidden, &g.params[idx::GATE_W].value, &g.params[idx::GATE_B].value)?;
    let gates = softmax_rows(&logits);
    let experts = dense_forward(hidden, &g.params[idx::EXP_W].value, &g.params[idx::EXP_B].value)?;
    let nm = d.disturbance;
    let mut u_hat = Matrix::zeros(hidden.rows(), nm);
    for b in 0..hidden.rows() {
        let e_row = experts.row(b);
        let g_row = gates.row(b);
        let out = u_hat.row_mut(b);
        for (j, &gj) in g_row.iter().enumerate() {
            for (o, e) in out.iter_mut().zip(&e_row[j * nm..(j + 1) * nm]) {
                *o += gj * e;
            }
        }
    }
    Ok(Disturbance {
        u_hat,
        gates,
        experts,
    })
}

/// Linear aggregation `z_m' = [û | z_m]·W + b`.
pub fn aggregate(params: &GtlParams, u_hat: &Matrix, z_m: &Matrix) -> Result<Matrix> {
    let nm = params.dims.disturbance;
    u_hat.ensure_shape("aggregate", z_m.rows(), nm)?;
    z_m.ensure_shape("aggregate", u_hat.rows(), nm)?;
    let g = &params.aggregator;
    dense_forward(&u_hat.hconcat(z_m)?, &g.params[idx::AGG_W].value, &g.params[idx::AGG_B].value)
}

#[derive(Clone, Debug)]
pub struct DecodeCache {
    input: Matrix,
    bn: BnCache,
    post_bn: Matrix,
    mask: Option<Matrix>,
    hidden: Matrix,
    bn_stats: Option<(Matrix, Matrix)>,
}

/// Generator `[z_c | z_m'] → dense→BN→ReLU→dropout→dense → x̂`. A frozen
/// generator always runs in eval mode.
pub fn decode(
    params: &GtlParams,
    z_c: &Matrix,
    z_m_prime: &Matrix,
    mode: Mode,
    dropout: f64,
    rng: &mut SeededRng,
) -> Result<(Matrix, DecodeCache)> {
    let d = &params.dims;
    z_c.ensure_shape("decode", z_c.rows(), d.concept)?;
    z_m_prime.ensure_shape("decode", z_c.rows(), d.disturbance)?;
    let g = &params.generator;
    let mode = if g.frozen { Mode::Eval } else { mode };
    let input = z_c.hconcat(z_m_prime)?;
    let pre_bn = dense_forward(&input, &g.params[idx::GEN_W].value, &g.params[idx::GEN_B].value)?;
    let bn = batchnorm_of(g, idx::GEN_GAMMA, idx::GEN_BETA);
    let (post_bn, bn_cache, bn_stats) =
        batchnorm_forward(&pre_bn, &bn, bn_mode(mode, input.rows()))?;
    let act = relu_forward(&post_bn);
    let (hidden, mask) = dropout_forward(&act, dropout, mode, rng)?;
    let x_hat = dense_forward(&hidden, &g.params[idx::OUT_W].value, &g.params[idx::OUT_B].value)?;
    Ok((
        x_hat,
        DecodeCache {
            input,
            bn: bn_cache,
            post_bn,
            mask,
            hidden,
            bn_stats,
        },
    ))
}

/// Classifier logits and the hidden activation needed for backward.
pub fn classifier_logits(params: &GtlParams, features: &Matrix) -> Result<(Matrix, Matrix)> {
    let g = &params.classifier;
    if features.cols() != params.classifier_input() {
        return Err(GtlError::dim(
            "classify",
            format!(
                "classifier reads {} features, got {}",
                params.classifier_input(),
                features.cols()
            ),
        ));
    }
    let hidden = dense_forward(features, &g.params[idx::CLS_W1].value, &g.params[idx::CLS_B1].value)?;
    let logits = dense_forward(&hidden, &g.params[idx::CLS_W2].value, &g.params[idx::CLS_B2].value)?;
    Ok((logits, hidden))
}

/// Class probabilities `softmax(classifier(z_c))`.
pub fn classify(params: &GtlParams, z_c: &Matrix) -> Result<Matrix> {
    Ok(softmax_rows(&classifier_logits(params, z_c)?.0))
}

/// Accumulates classifier gradients for `dlogits`.
pub fn classifier_backward(
    params: &mut GtlParams,
    features: &Matrix,
    hidden: &Matrix,
    dlogits: &Matrix,
) -> Result<()> {
    let g = &mut params.classifier;
    let out = dense_backward(hidden, &g.params[idx::CLS_W2].value, dlogits)?;
    let inner = dense_backward(features, &g.params[idx::CLS_W1].value, &out.dx)?;
    g.params[idx::CLS_W2].grad.add_assign(&out.dw)?;
    g.params[idx::CLS_B2].grad.add_assign(&out.db)?;
    g.params[idx::CLS_W1].grad.add_assign(&inner.dw)?;
    g.params[idx::CLS_B1].grad.add_assign(&inner.db)?;
    Ok(())
}

/// Negated ELBO, split into its two terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ElboTerms {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

/// `‖x − x̂‖² + λ·KL(q(z|x) ‖ N(0, I))`, both averaged over the batch.
pub fn elbo_loss(x: &Matrix, sample: &LatentSample, x_hat: &Matrix, lambda: f64) -> Result<ElboTerms> {
    let recon = squared_error(x, x_hat)?;
    let kl = gaussian_kl(&sample.mu, &sample.logvar)?;
    Ok(ElboTerms {
        total: recon + lambda * kl,
        recon,
        kl,
    })
}

/// Cross-entropy from logits.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    Ok(softmax_ce(logits, labels)?.0)
}

/// Everything one full forward pass produces, including caches for
/// [`elbo_backward`].
#[derive(Clone, Debug)]
pub struct FullForward {
    pub sample: LatentSample,
    pub x_hat: Matrix,
    pub logits: Matrix,
    pub ablation: Ablation,
    enc: EncodeCache,
    dec: DecodeCache,
    experts: Option<Matrix>,
    agg_input: Option<Matrix>,
}

pub fn forward_full(
    params: &GtlParams,
    x: &Matrix,
    opts: &ForwardOptions,
    rng: &mut SeededRng,
) -> Result<FullForward> {
    let enc = encode(params, x, opts.mode, opts.dropout, rng)?;
    let (u_hat, gates, experts, agg_input, z_m_prime) = match opts.ablation {
        Ablation::NoZm => (
            None,
            None,
            None,
            None,
            Matrix::zeros(x.rows(), params.dims.disturbance),
        ),
        Ablation::Full | Ablation::NoZ => {
            let dist = estimate_disturbance(params, &enc.hidden)?;
            let agg_input = dist.u_hat.hconcat(&enc.z_m)?;
            let z_m_prime = aggregate(params, &dist.u_hat, &enc.z_m)?;
            (
                Some(dist.u_hat),
                Some(dist.gates),
                Some(dist.experts),
                Some(agg_input),
                z_m_prime,
            )
        }
    };
    let (x_hat, dec) = decode(params, &enc.z_c, &z_m_prime, opts.mode, opts.dropout, rng)?;
    let logits = match opts.ablation {
        Ablation::NoZ => classifier_logits(params, x)?.0,
        _ => classifier_logits(params, &enc.z_c)?.0,
    };
    Ok(FullForward {
        sample: LatentSample {
            hidden: enc.hidden,
            mu: enc.mu,
            logvar: enc.logvar,
            z_c: enc.z_c,
            z_m: enc.z_m,
            u_hat,
            z_m_prime,
            gates,
        },
        x_hat,
        logits,
        ablation: opts.ablation,
        enc: enc.cache,
        dec,
        experts,
        agg_input,
    })
}

fn accumulate(group: &mut ParamGroup, i: usize, g: &Matrix) -> Result<()> {
    group.params[i].grad.add_assign(g)
}

/// Backpropagates the ELBO of `fwd` and adds the gradients of encoder,
/// disturbance, aggregator and generator into their groups. Returns the
/// loss terms.
pub fn elbo_backward(
    params: &mut GtlParams,
    x: &Matrix,
    fwd: &FullForward,
    lambda: f64,
) -> Result<ElboTerms> {
    let terms = elbo_loss(x, &fwd.sample, &fwd.x_hat, lambda)?;
    let dims = params.dims;
    let (nc, nm) = (dims.concept, dims.disturbance);
    let b = x.rows();

    // generator
    let dx_hat = squared_error_backward(x, &fwd.x_hat)?;
    let gen = &mut params.generator;
    let out = dense_backward(&fwd.dec.hidden, &gen.params[idx::OUT_W].value, &dx_hat)?;
    accumulate(gen, idx::OUT_W, &out.dw)?;
    accumulate(gen, idx::OUT_B, &out.db)?;
    let d_act = dropout_backward(fwd.dec.mask.as_ref(), &out.dx)?;
    let d_bn_out = relu_backward(&fwd.dec.post_bn, &d_act)?;
    let bn = batchnorm_backward(&fwd.dec.bn, &gen.params[idx::GEN_GAMMA].value, &d_bn_out)?;
    accumulate(gen, idx::GEN_GAMMA, &bn.dgamma)?;
    accumulate(gen, idx::GEN_BETA, &bn.dbeta)?;
    let inp = dense_backward(&fwd.dec.input, &gen.params[idx::GEN_W].value, &bn.dx)?;
    accumulate(gen, idx::GEN_W, &inp.dw)?;
    accumulate(gen, idx::GEN_B, &inp.db)?;
    let dz_c = inp.dx.slice_cols(0, nc);
    let dz_m_prime = inp.dx.slice_cols(nc, nc + nm);

    // aggregator and disturbance estimator
    let mut dz_m = Matrix::zeros(b, nm);
    let mut dhidden = Matrix::zeros(b, dims.hidden);
    if let (Some(agg_input), Some(experts), Some(gates)) =
        (&fwd.agg_input, &fwd.experts, &fwd.sample.gates)
    {
        let agg = &mut params.aggregator;
        let ag = dense_backward(agg_input, &agg.params[idx::AGG_W].value, &dz_m_prime)?;
        accumulate(agg, idx::AGG_W, &ag.dw)?;
        accumulate(agg, idx::AGG_B, &ag.db)?;
        let du_hat = ag.dx.slice_cols(0, nm);
        dz_m = ag.dx.slice_cols(nm, 2 * nm);

        let d = dims.domains;
        let mut d_experts = Matrix::zeros(b, d * nm);
        let mut d_gate_logits = Matrix::zeros(b, d);
        for r in 0..b {
            let du = du_hat.row(r);
            let e_row = experts.row(r);
            let g_row = gates.row(r);
            let mut dg = vec![0.0; d];
            {
                let de = d_experts.row_mut(r);
                for j in 0..d {
                    let mut dot = 0.0;
                    for k in 0..nm {
                        de[j * nm + k] = g_row[j] * du[k];
                        dot += e_row[j * nm + k] * du[k];
                    }
                    dg[j] = dot;
                }
            }
            let weighted: f64 = g_row.iter().zip(&dg).map(|(g, v)| g * v).sum();
            let dl = d_gate_logits.row_mut(r);
            for j in 0..d {
                dl[j] = g_row[j] * (dg[j] - weighted);
            }
        }
        let dist = &mut params.disturbance;
        let ge = dense_backward(&fwd.sample.hidden, &dist.params[idx::EXP_W].value, &d_experts)?;
        accumulate(dist, idx::EXP_W, &ge.dw)?;
        accumulate(dist, idx::EXP_B, &ge.db)?;
        let gg = dense_backward(&fwd.sample.hidden, &dist.params[idx::GATE_W].value, &d_gate_logits)?;
        accumulate(dist, idx::GATE_W, &gg.dw)?;
        accumulate(dist, idx::GATE_B, &gg.db)?;
        dhidden.add_assign(&ge.dx)?;
        dhidden.add_assign(&gg.dx)?;
    }

    // posterior: sample path plus the KL term
    let dz = dz_c.hconcat(&dz_m)?;
    let (mut dmu, mut dlogvar) = match &fwd.enc.eps {
        Some(eps) => reparameterize_backward(&fwd.sample.logvar, eps, &dz)?,
        None => (dz, Matrix::zeros(b, dims.latent())),
    };
    let (kl_mu, kl_lv) = gaussian_kl_backward(&fwd.sample.mu, &fwd.sample.logvar);
    dmu.add_assign(&kl_mu.map(|v| lambda * v))?;
    dlogvar.add_assign(&kl_lv.map(|v| lambda * v))?;
    let dlogvar_raw = clamp_logvar_backward(&fwd.enc.logvar_raw, &dlogvar)?;

    let enc = &mut params.encoder;
    let mu_g = dense_backward(&fwd.sample.hidden, &enc.params[idx::MU_W].value, &dmu)?;
    accumulate(enc, idx::MU_W, &mu_g.dw)?;
    accumulate(enc, idx::MU_B, &mu_g.db)?;
    let lv_g = dense_backward(&fwd.sample.hidden, &enc.params[idx::LV_W].value, &dlogvar_raw)?;
    accumulate(enc, idx::LV_W, &lv_g.dw)?;
    accumulate(enc, idx::LV_B, &lv_g.db)?;
    dhidden.add_assign(&mu_g.dx)?;
    dhidden.add_assign(&lv_g.dx)?;

    let d_act = dropout_backward(fwd.enc.mask.as_ref(), &dhidden)?;
    let d_bn_out = relu_backward(&fwd.enc.post_bn, &d_act)?;
    let bn = batchnorm_backward(&fwd.enc.bn, &enc.params[idx::ENC_GAMMA].value, &d_bn_out)?;
    accumulate(enc, idx::ENC_GAMMA, &bn.dgamma)?;
    accumulate(enc, idx::ENC_BETA, &bn.dbeta)?;
    let first = dense_backward(&fwd.enc.x, &enc.params[idx::ENC_W].value, &bn.dx)?;
    accumulate(enc, idx::ENC_W, &first.dw)?;
    accumulate(enc, idx::ENC_B, &first.db)?;
    Ok(terms)
}

/// Writes the batch-norm running statistics observed in `fwd` back into the
/// encoder and generator, skipping frozen groups.
pub fn apply_running_stats(params: &mut GtlParams, fwd: &FullForward) {
    for (group, stats) in [
        (&mut params.encoder, &fwd.enc.bn_stats),
        (&mut params.generator, &fwd.dec.bn_stats),
    ] {
        if group.frozen {
            continue;
        }
        if let Some((mean, var)) = stats {
            group.buffers[idx::RUN_MEAN].1 = mean.clone();
            group.buffers[idx::RUN_VAR].1 = var.clone();
        }
    }
}

/// Same as [`apply_running_stats`] for an encoder-only pass.
pub fn apply_encoder_running_stats(params: &mut GtlParams, enc: &Encoding) {
    if params.encoder.frozen {
        return;
    }
    if let Some((mean, var)) = &enc.cache.bn_stats {
        params.encoder.buffers[idx::RUN_MEAN].1 = mean.clone();
        params.encoder.buffers[idx::RUN_VAR].1 = var.clone();
    }
}
