//! Losses and the Gaussian reparameterization used by the variational
//! objective.

use crate::error::{GtlError, Result};
use crate::numerics::{Matrix, SeededRng};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Row-wise softmax, computed with the max-shift.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy of `softmax(logits)` against integer labels, and its
/// gradient with respect to the logits.
pub fn softmax_ce(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    if labels.len() != b {
        return Err(GtlError::dim(
            "softmax_ce",
            format!("{} labels for {b} rows", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(GtlError::Index(format!("label {bad} with {c} classes")));
    }
    if b == 0 {
        return Ok((0.0, Matrix::zeros(0, c)));
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        grad.row_mut(r)[label] -= 1.0;
    }
    grad.scale(1.0 / b as f64);
    Ok((loss / b as f64, grad))
}

/// `KL(N(μ, e^logvar) || N(0, I))`, summed over latent dims and averaged
/// over the batch.
pub fn gaussian_kl(mu: &Matrix, logvar: &Matrix) -> Result<f64> {
    if mu.shape() != logvar.shape() {
        return Err(GtlError::dim(
            "gaussian_kl",
            format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()),
        ));
    }
    if mu.rows() == 0 {
        return Ok(0.0);
    }
    let total: f64 = mu
        .as_slice()
        .iter()
        .zip(logvar.as_slice())
        .map(|(&m, &lv)| 0.5 * (m * m + lv.exp() - 1.0 - lv))
        .sum();
    Ok(total / mu.rows() as f64)
}

/// Gradients of [`gaussian_kl`] with respect to `mu` and `logvar`.
pub fn gaussian_kl_backward(mu: &Matrix, logvar: &Matrix) -> (Matrix, Matrix) {
    let n = mu.rows().max(1) as f64;
    let dmu = mu.map(|m| m / n);
    let dlv = logvar.map(|lv| 0.5 * (lv.exp() - 1.0) / n);
    (dmu, dlv)
}

/// Reconstruction error: squared error summed over features, averaged over
/// the batch. This is the negative log-likelihood of a unit-variance
/// Gaussian decoder up to a factor and a constant.
pub fn squared_error(x: &Matrix, x_hat: &Matrix) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(GtlError::dim(
            "squared_error",
            format!("{:?} vs {:?}", x.shape(), x_hat.shape()),
        ));
    }
    if x.rows() == 0 {
        return Ok(0.0);
    }
    let s: f64 = x
        .as_slice()
        .iter()
        .zip(x_hat.as_slice())
        .map(|(a, b)| (b - a) * (b - a))
        .sum();
    Ok(s / x.rows() as f64)
}

/// Gradient of [`squared_error`] with respect to `x_hat`.
pub fn squared_error_backward(x: &Matrix, x_hat: &Matrix) -> Result<Matrix> {
    let n = x.rows().max(1) as f64;
    x_hat.zip_map(x, |h, a| 2.0 * (h - a) / n)
}

pub fn clamp_logvar(raw: &Matrix) -> Matrix {
    raw.map(|v| v.clamp(LOGVAR_MIN, LOGVAR_MAX))
}

/// Passes the gradient through the clamp only where it was inactive.
pub fn clamp_logvar_backward(raw: &Matrix, dclamped: &Matrix) -> Result<Matrix> {
    raw.zip_map(dclamped, |r, g| {
        if (LOGVAR_MIN..=LOGVAR_MAX).contains(&r) {
            g
        } else {
            0.0
        }
    })
}

/// A reparameterized Gaussian sample `μ + e^{logvar/2} ⊙ ε`, keeping `ε` for
/// the backward pass.
#[derive(Clone, Debug)]
pub struct Reparam {
    pub z: Matrix,
    pub eps: Matrix,
}

pub fn reparameterize(mu: &Matrix, logvar: &Matrix, rng: &mut SeededRng) -> Result<Reparam> {
    if mu.shape() != logvar.shape() {
        return Err(GtlError::dim(
            "reparameterize",
            format!("mu {:?} vs logvar {:?}", mu.shape(), logvar.shape()),
        ));
    }
    let mut eps = Matrix::zeros(mu.rows(), mu.cols());
    for e in eps.as_mut_slice() {
        *e = rng.normal();
    }
    let mut z = Matrix::zeros(mu.rows(), mu.cols());
    for (((o, &m), &lv), &e) in z
        .as_mut_slice()
        .iter_mut()
        .zip(mu.as_slice())
        .zip(logvar.as_slice())
        .zip(eps.as_slice())
    {
        *o = m + (0.5 * lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp() * e;
    }
    Ok(Reparam { z, eps })
}

/// Given `dz`, returns `(dmu, dlogvar)`.
pub fn reparameterize_backward(
    logvar: &Matrix,
    eps: &Matrix,
    dz: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let scale = logvar.zip_map(eps, |lv, e| 0.5 * (0.5 * lv).exp() * e)?;
    let dlv = dz.zip_map(&scale, |g, s| g * s)?;
    Ok((dz.clone(), dlv))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    #[test]
    fn ce_uniform_logits_is_ln_c() {
        for c in [2usize, 3, 10, 61] {
            let logits = Matrix::filled(4, c, 0.7);
            let (loss, _) = softmax_ce(&logits, &[0, 1, 0, 1]).unwrap();
            assert!((loss - (c as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_saturated_true_class() {
        let mut logits = Matrix::zeros(2, 3);
        logits.set(0, 2, 1e6);
        logits.set(1, 0, 1e6);
        let (loss, _) = softmax_ce(&logits, &[2, 0]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn ce_matches_log_sum_exp_oracle() {
        let mut rng = SeededRng::new(12);
        let logits = random(4, 3, &mut rng);
        let labels = [0, 2, 1, 2];
        let (loss, grad) = softmax_ce(&logits, &labels).unwrap();
        let mut oracle = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            oracle += lse - row[y];
        }
        oracle /= 4.0;
        assert!((loss - oracle).abs() < 1e-10);
        // gradient rows sum to zero since softmax rows sum to one
        for r in 0..4 {
            assert!(grad.row(r).iter().sum::<f64>().abs() < 1e-12);
        }
    }

    #[test]
    fn ce_rejects_out_of_range_label() {
        let logits = Matrix::zeros(1, 3);
        assert!(matches!(softmax_ce(&logits, &[3]), Err(GtlError::Index(_))));
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(13);
        let logits = random(3, 4, &mut rng);
        let labels = [3, 0, 1];
        let (_, grad) = softmax_ce(&logits, &labels).unwrap();
        let h = 1e-5;
        for i in 0..logits.len() {
            let mut p = logits.clone();
            p.as_mut_slice()[i] += h;
            let mut m = logits.clone();
            m.as_mut_slice()[i] -= h;
            let num = (softmax_ce(&p, &labels).unwrap().0 - softmax_ce(&m, &labels).unwrap().0)
                / (2.0 * h);
            assert!((num - grad.as_slice()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn kl_closed_forms() {
        let z = Matrix::zeros(3, 5);
        assert_eq!(gaussian_kl(&z, &z).unwrap(), 0.0);
        let mu = Matrix::row_vector(vec![1.0]);
        let lv = Matrix::row_vector(vec![0.0]);
        assert!((gaussian_kl(&mu, &lv).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kl_matches_monte_carlo() {
        // KL = E_q[log q(z) - log p(z)], estimated with 1e5 draws per dim.
        let mut rng = SeededRng::new(14);
        let mu = Matrix::row_vector(vec![0.8, -0.3]);
        let lv = Matrix::row_vector(vec![-0.5, 0.4]);
        let kl = gaussian_kl(&mu, &lv).unwrap();
        assert!(kl >= 0.0);
        let n = 100_000;
        let mut samples = Vec::with_capacity(n);
        for _ in 0..n {
            let mut s = 0.0;
            for j in 0..2 {
                let m = mu.get(0, j);
                let sd = (0.5 * lv.get(0, j)).exp();
                let z = m + sd * rng.normal();
                let log_q = -0.5 * ((z - m) / sd).powi(2) - sd.ln();
                let log_p = -0.5 * z * z;
                s += log_q - log_p;
            }
            samples.push(s);
        }
        let mean = samples.iter().sum::<f64>() / n as f64;
        let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n as f64 - 1.0);
        let se = (var / n as f64).sqrt();
        assert!((mean - kl).abs() < 3.0 * se, "mc {mean} vs {kl} (se {se})");
    }

    #[test]
    fn kl_gradients_match_finite_differences() {
        let mut rng = SeededRng::new(15);
        let mu = random(3, 4, &mut rng);
        let lv = random(3, 4, &mut rng);
        let (dmu, dlv) = gaussian_kl_backward(&mu, &lv);
        let h = 1e-6;
        for i in 0..mu.len() {
            let mut p = mu.clone();
            p.as_mut_slice()[i] += h;
            let mut m = mu.clone();
            m.as_mut_slice()[i] -= h;
            let num = (gaussian_kl(&p, &lv).unwrap() - gaussian_kl(&m, &lv).unwrap()) / (2.0 * h);
            assert!((num - dmu.as_slice()[i]).abs() < 1e-8);
            let mut p = lv.clone();
            p.as_mut_slice()[i] += h;
            let mut m = lv.clone();
            m.as_mut_slice()[i] -= h;
            let num = (gaussian_kl(&mu, &p).unwrap() - gaussian_kl(&mu, &m).unwrap()) / (2.0 * h);
            assert!((num - dlv.as_slice()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn reparam_zero_variance_limit() {
        let mut rng = SeededRng::new(16);
        let mu = random(4, 3, &mut rng);
        let lv = Matrix::filled(4, 3, -1e6);
        let r = reparameterize(&mu, &lv, &mut rng).unwrap();
        for (z, m) in r.z.as_slice().iter().zip(mu.as_slice()) {
            assert!((z - m).abs() < 1e-6);
        }
    }

    #[test]
    fn reparam_is_bit_deterministic() {
        let mu = Matrix::filled(2, 3, 0.1);
        let lv = Matrix::filled(2, 3, -0.2);
        let a = reparameterize(&mu, &lv, &mut SeededRng::new(99)).unwrap();
        let b = reparameterize(&mu, &lv, &mut SeededRng::new(99)).unwrap();
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn reparam_backward_definition() {
        let lv = Matrix::row_vector(vec![0.4, -1.0]);
        let eps = Matrix::row_vector(vec![1.5, -0.5]);
        let dz = Matrix::row_vector(vec![1.0, 2.0]);
        let (dmu, dlv) = reparameterize_backward(&lv, &eps, &dz).unwrap();
        assert_eq!(dmu, dz);
        assert!((dlv.get(0, 0) - 0.5 * (0.2f64).exp() * 1.5).abs() < 1e-15);
        assert!((dlv.get(0, 1) - 2.0 * 0.5 * (-0.5f64).exp() * -0.5).abs() < 1e-15);
    }
}
