//! Forward/backward kernels for the layers the model uses: dense, ReLU,
//! batch normalization and inverted dropout.

use crate::error::{GtlError, Result};
use crate::numerics::{Matrix, SeededRng};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// `x·W + b`, with `b` a `1×O` row broadcast over the batch.
pub fn dense_forward(x: &Matrix, w: &Matrix, b: &Matrix) -> Result<Matrix> {
    if b.rows() != 1 || b.cols() != w.cols() {
        return Err(GtlError::dim(
            "dense_forward",
            format!("bias {:?} for weight {:?}", b.shape(), w.shape()),
        ));
    }
    let mut out = x.matmul(w)?;
    out.add_row_broadcast(b)?;
    Ok(out)
}

/// Gradients of a dense layer.
pub struct DenseGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub db: Matrix,
}

pub fn dense_backward(x: &Matrix, w: &Matrix, dout: &Matrix) -> Result<DenseGrads> {
    if x.cols() != w.rows() || dout.cols() != w.cols() || dout.rows() != x.rows() {
        return Err(GtlError::dim(
            "dense_backward",
            format!(
                "x {:?}, w {:?}, dout {:?}",
                x.shape(),
                w.shape(),
                dout.shape()
            ),
        ));
    }
    Ok(DenseGrads {
        dx: dout.matmul_t(w)?,
        dw: x.t_matmul(dout)?,
        db: dout.col_sums(),
    })
}

pub fn relu_forward(x: &Matrix) -> Matrix {
    x.map(|v| v.max(0.0))
}

/// `pre` is the ReLU input. The subgradient at 0 is taken as 0.
pub fn relu_backward(pre: &Matrix, dout: &Matrix) -> Result<Matrix> {
    pre.zip_map(dout, |p, g| if p > 0.0 { g } else { 0.0 })
}

/// Learnable scale/shift plus running statistics for one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub gamma: Matrix,
    pub beta: Matrix,
    pub running_mean: Matrix,
    pub running_var: Matrix,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(features: usize) -> Self {
        BatchNormState {
            gamma: Matrix::filled(1, features, 1.0),
            beta: Matrix::zeros(1, features),
            running_mean: Matrix::zeros(1, features),
            running_var: Matrix::filled(1, features, 1.0),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.gamma.cols()
    }
}

/// What the backward pass needs from a batch-norm forward.
#[derive(Clone, Debug)]
pub struct BnCache {
    pub xhat: Matrix,
    pub inv_std: Vec<f64>,
    pub batch_stats: bool,
}

/// Batch-norm forward. Train mode normalizes with the (biased) batch
/// statistics; eval mode with the running statistics. The running statistics
/// are returned, not written, so callers decide whether a layer may update.
pub fn batchnorm_forward(
    x: &Matrix,
    bn: &BatchNormState,
    mode: Mode,
) -> Result<(Matrix, BnCache, Option<(Matrix, Matrix)>)> {
    let f = bn.features();
    if x.cols() != f {
        return Err(GtlError::dim(
            "batchnorm_forward",
            format!("{} features into a {f}-wide layer", x.cols()),
        ));
    }
    let b = x.rows();
    let (mean, var, new_stats) = match mode {
        Mode::Train => {
            if b < 2 {
                return Err(GtlError::BatchTooSmall(b));
            }
            let mut mean = vec![0.0; f];
            for r in 0..b {
                for (m, v) in mean.iter_mut().zip(x.row(r)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= b as f64);
            let mut var = vec![0.0; f];
            for r in 0..b {
                for ((s, v), m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            var.iter_mut().for_each(|s| *s /= b as f64);
            let unbias = b as f64 / (b as f64 - 1.0);
            let mom = bn.momentum;
            let rm: Vec<f64> = bn
                .running_mean
                .as_slice()
                .iter()
                .zip(&mean)
                .map(|(r, m)| (1.0 - mom) * r + mom * m)
                .collect();
            let rv: Vec<f64> = bn
                .running_var
                .as_slice()
                .iter()
                .zip(&var)
                .map(|(r, v)| (1.0 - mom) * r + mom * v * unbias)
                .collect();
            (
                mean,
                var,
                Some((Matrix::row_vector(rm), Matrix::row_vector(rv))),
            )
        }
        Mode::Eval => (
            bn.running_mean.as_slice().to_vec(),
            bn.running_var.as_slice().to_vec(),
            None,
        ),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
    let mut xhat = Matrix::zeros(b, f);
    let mut y = Matrix::zeros(b, f);
    for r in 0..b {
        for j in 0..f {
            let h = (x.get(r, j) - mean[j]) * inv_std[j];
            xhat.set(r, j, h);
            y.set(r, j, bn.gamma.get(0, j) * h + bn.beta.get(0, j));
        }
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            batch_stats: mode == Mode::Train,
        },
        new_stats,
    ))
}

pub struct BnGrads {
    pub dx: Matrix,
    pub dgamma: Matrix,
    pub dbeta: Matrix,
}

pub fn batchnorm_backward(cache: &BnCache, gamma: &Matrix, dy: &Matrix) -> Result<BnGrads> {
    let (b, f) = dy.shape();
    cache.xhat.ensure_shape("batchnorm_backward", b, f)?;
    let mut dgamma = Matrix::zeros(1, f);
    let mut dbeta = Matrix::zeros(1, f);
    for r in 0..b {
        for j in 0..f {
            let g = dy.get(r, j);
            dbeta.as_mut_slice()[j] += g;
            dgamma.as_mut_slice()[j] += g * cache.xhat.get(r, j);
        }
    }
    let mut dx = Matrix::zeros(b, f);
    if cache.batch_stats {
        let n = b as f64;
        for j in 0..f {
            let k = gamma.get(0, j) * cache.inv_std[j] / n;
            let sum_dy = dbeta.get(0, j);
            let sum_dy_xhat = dgamma.get(0, j);
            for r in 0..b {
                let v = k * (n * dy.get(r, j) - sum_dy - cache.xhat.get(r, j) * sum_dy_xhat);
                dx.set(r, j, v);
            }
        }
    } else {
        for r in 0..b {
            for j in 0..f {
                dx.set(r, j, dy.get(r, j) * gamma.get(0, j) * cache.inv_std[j]);
            }
        }
    }
    Ok(BnGrads { dx, dgamma, dbeta })
}

/// Inverted dropout. Returns the output and the scaling mask (entries are
/// `0` or `1/keep`), or `None` when the layer is the identity.
pub fn dropout_forward(
    x: &Matrix,
    rate: f64,
    mode: Mode,
    rng: &mut SeededRng,
) -> Result<(Matrix, Option<Matrix>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(GtlError::Validation(format!(
            "dropout rate {rate} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = 1.0 - rate;
    let scale = 1.0 / keep;
    let mut mask = Matrix::zeros(x.rows(), x.cols());
    for m in mask.as_mut_slice() {
        if rng.uniform() < keep {
            *m = scale;
        }
    }
    let y = x.zip_map(&mask, |a, m| a * m)?;
    Ok((y, Some(mask)))
}

pub fn dropout_backward(mask: Option<&Matrix>, dy: &Matrix) -> Result<Matrix> {
    match mask {
        None => Ok(dy.clone()),
        Some(m) => dy.zip_map(m, |g, k| g * k),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.normal()).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    /// Weighted sum of the output, so each backward check reduces to a
    /// scalar function of the input.
    fn probe(y: &Matrix, weights: &Matrix) -> f64 {
        y.as_slice()
            .iter()
            .zip(weights.as_slice())
            .map(|(a, b)| a * b)
            .sum()
    }

    fn fd_check(x: &Matrix, analytic: &Matrix, mut f: impl FnMut(&Matrix) -> f64) {
        let h = 1e-5;
        for i in 0..x.len() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let num = (f(&xp) - f(&xm)) / (2.0 * h);
            let ana = analytic.as_slice()[i];
            let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-8);
            assert!(rel < 1e-6 || (num - ana).abs() < 1e-9, "entry {i}: {num} vs {ana}");
        }
    }

    #[test]
    fn dense_identity_case() {
        let i2 = Matrix::identity(2);
        let out = dense_forward(&i2, &i2, &Matrix::zeros(1, 2)).unwrap();
        assert_eq!(out, i2);
    }

    #[test]
    fn dense_hand_arithmetic() {
        let x = Matrix::from_rows(&[vec![1.0, 2.0]]);
        let w = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        let b = Matrix::row_vector(vec![1.0]);
        assert_eq!(dense_forward(&x, &w, &b).unwrap().as_slice(), &[4.0]);
    }

    #[test]
    fn dense_matches_triple_loop() {
        let mut rng = SeededRng::new(3);
        let x = random(3, 5, &mut rng);
        let w = random(5, 4, &mut rng);
        let b = random(1, 4, &mut rng);
        let out = dense_forward(&x, &w, &b).unwrap();
        for i in 0..3 {
            for j in 0..4 {
                let mut s = b.get(0, j);
                for k in 0..5 {
                    s += x.get(i, k) * w.get(k, j);
                }
                assert!((out.get(i, j) - s).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn dense_shape_mismatch() {
        let x = Matrix::zeros(2, 3);
        let w = Matrix::zeros(4, 2);
        assert!(dense_forward(&x, &w, &Matrix::zeros(1, 2)).is_err());
        assert!(dense_backward(&x, &w, &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn dense_backward_zero_and_scalar() {
        let mut rng = SeededRng::new(4);
        let x = random(3, 2, &mut rng);
        let w = random(2, 4, &mut rng);
        let g = dense_backward(&x, &w, &Matrix::zeros(3, 4)).unwrap();
        assert_eq!(g.dx.max_abs() + g.dw.max_abs() + g.db.max_abs(), 0.0);

        let g = dense_backward(
            &Matrix::row_vector(vec![2.0]),
            &Matrix::row_vector(vec![3.0]),
            &Matrix::row_vector(vec![1.0]),
        )
        .unwrap();
        assert_eq!(g.dw.as_slice(), &[2.0]);
        assert_eq!(g.dx.as_slice(), &[3.0]);
        assert_eq!(g.db.as_slice(), &[1.0]);
    }

    #[test]
    fn dense_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(5);
        let x = random(4, 3, &mut rng);
        let w = random(3, 5, &mut rng);
        let b = random(1, 5, &mut rng);
        let probe_w = random(4, 5, &mut rng);
        let g = dense_backward(&x, &w, &probe_w).unwrap();
        fd_check(&x, &g.dx, |xx| probe(&dense_forward(xx, &w, &b).unwrap(), &probe_w));
        fd_check(&w, &g.dw, |ww| probe(&dense_forward(&x, ww, &b).unwrap(), &probe_w));
        fd_check(&b, &g.db, |bb| probe(&dense_forward(&x, &w, bb).unwrap(), &probe_w));
    }

    #[test]
    fn relu_definition() {
        let y = relu_forward(&Matrix::row_vector(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.as_slice(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(6);
        let x = random(3, 4, &mut rng);
        let p = random(3, 4, &mut rng);
        let dx = relu_backward(&x, &p).unwrap();
        fd_check(&x, &dx, |xx| probe(&relu_forward(xx), &p));
    }

    #[test]
    fn batchnorm_two_sample_normalization() {
        let bn = BatchNormState::new(1);
        let x = Matrix::from_rows(&[vec![1.0], vec![3.0]]);
        let (y, _, stats) = batchnorm_forward(&x, &bn, Mode::Train).unwrap();
        // mean 2, biased var 1: (x - 2) / sqrt(1 + 1e-5)
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((y.get(0, 0) + expect).abs() < 1e-15);
        assert!((y.get(1, 0) - expect).abs() < 1e-15);
        assert!((y.get(0, 0) + 1.0).abs() < 1e-5);
        let (rm, rv) = stats.unwrap();
        assert!((rm.get(0, 0) - 0.2).abs() < 1e-15);
        // unbiased variance 2 blended with momentum 0.1 into 1.0
        assert!((rv.get(0, 0) - 1.1).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_train_rejects_single_sample() {
        let bn = BatchNormState::new(3);
        let x = Matrix::zeros(1, 3);
        assert!(matches!(
            batchnorm_forward(&x, &bn, Mode::Train),
            Err(GtlError::BatchTooSmall(1))
        ));
        assert!(batchnorm_forward(&x, &bn, Mode::Eval).is_ok());
    }

    #[test]
    fn batchnorm_eval_uses_running_stats() {
        let mut bn = BatchNormState::new(2);
        bn.running_mean = Matrix::row_vector(vec![1.0, -1.0]);
        bn.running_var = Matrix::row_vector(vec![4.0, 0.25]);
        let x = Matrix::from_rows(&[vec![3.0, 0.0]]);
        let (y, _, stats) = batchnorm_forward(&x, &bn, Mode::Eval).unwrap();
        assert!(stats.is_none());
        assert!((y.get(0, 0) - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-15);
        assert!((y.get(0, 1) - 1.0 / (0.25f64 + 1e-5).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_backward_matches_finite_differences() {
        let mut rng = SeededRng::new(8);
        let mut bn = BatchNormState::new(3);
        bn.gamma = random(1, 3, &mut rng);
        bn.beta = random(1, 3, &mut rng);
        bn.running_var = Matrix::row_vector(vec![0.5, 2.0, 1.5]);
        let x = random(5, 3, &mut rng);
        let p = random(5, 3, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let (_, cache, _) = batchnorm_forward(&x, &bn, mode).unwrap();
            let g = batchnorm_backward(&cache, &bn.gamma, &p).unwrap();
            fd_check(&x, &g.dx, |xx| probe(&batchnorm_forward(xx, &bn, mode).unwrap().0, &p));
            fd_check(&bn.gamma, &g.dgamma, |gg| {
                let mut b2 = bn.clone();
                b2.gamma = gg.clone();
                probe(&batchnorm_forward(&x, &b2, mode).unwrap().0, &p)
            });
            fd_check(&bn.beta, &g.dbeta, |bb| {
                let mut b2 = bn.clone();
                b2.beta = bb.clone();
                probe(&batchnorm_forward(&x, &b2, mode).unwrap().0, &p)
            });
        }
    }

    #[test]
    fn dropout_zero_rate_is_identity() {
        let mut rng = SeededRng::new(9);
        let x = random(4, 4, &mut rng);
        for mode in [Mode::Train, Mode::Eval] {
            let (y, mask) = dropout_forward(&x, 0.0, mode, &mut rng).unwrap();
            assert_eq!(y, x);
            assert!(mask.is_none());
        }
    }

    #[test]
    fn dropout_eval_is_identity_and_train_scales_kept_units() {
        let mut rng = SeededRng::new(10);
        let x = Matrix::filled(50, 40, 1.0);
        let (y, _) = dropout_forward(&x, 0.5, Mode::Eval, &mut rng).unwrap();
        assert_eq!(y, x);
        let (y, mask) = dropout_forward(&x, 0.5, Mode::Train, &mut rng).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
        let kept = mask.unwrap().as_slice().iter().filter(|&&m| m > 0.0).count();
        // 2000 Bernoulli(0.5) draws: mean 1000, sd ~22.4
        assert!((kept as f64 - 1000.0).abs() < 3.0 * 22.37);
        assert!(dropout_forward(&x, 1.0, Mode::Train, &mut rng).is_err());
    }

    #[test]
    fn dropout_backward_matches_finite_differences_with_fixed_mask() {
        let mut rng = SeededRng::new(11);
        let x = random(3, 5, &mut rng);
        let p = random(3, 5, &mut rng);
        let (_, mask) = dropout_forward(&x, 0.3, Mode::Train, &mut rng).unwrap();
        let mask = mask.unwrap();
        let dx = dropout_backward(Some(&mask), &p).unwrap();
        fd_check(&x, &dx, |xx| probe(&xx.zip_map(&mask, |a, m| a * m).unwrap(), &p));
    }
}
