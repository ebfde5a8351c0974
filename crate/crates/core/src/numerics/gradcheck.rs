//! Central finite-difference gradient checker.
//!
//! The objective is a closure that evaluates the loss for the current
//! parameter values and writes analytic gradients into the groups. Every
//! unfrozen parameter entry (or a seeded subsample for large tensors) is
//! perturbed by `±h` and the resulting difference quotient is compared with
//! the analytic gradient.

use std::fmt;

use crate::error::Result;
use crate::numerics::{ParamGroup, SeededRng};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
    /// Relative errors are measured against
    /// `max(|analytic|, |numeric|, floor·max(1, |loss|))`, which keeps
    /// round-off on exactly-zero gradients from counting as error.
    pub floor: f64,
    /// Entries checked per tensor before subsampling kicks in.
    pub max_entries_per_tensor: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_entries_per_tensor: 64,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntryError {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub entries_checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<EntryError>,
    /// Worst relative error per checked tensor, in visiting order.
    pub per_param: Vec<(String, f64)>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < self.tol
    }

    pub fn checked_params(&self) -> impl Iterator<Item = &str> {
        self.per_param.iter().map(|(n, _)| n.as_str())
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} entries over {} tensors, max rel err {:.3e} (tol {:.1e})",
            self.entries_checked,
            self.per_param.len(),
            self.max_rel_err,
            self.tol
        )?;
        if let Some(w) = &self.worst {
            write!(
                f,
                "; worst {}[{}] analytic {:.6e} numeric {:.6e}",
                w.param, w.index, w.analytic, w.numeric
            )?;
        }
        Ok(())
    }
}

pub fn grad_check<F>(
    groups: &mut [ParamGroup],
    mut objective: F,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut [ParamGroup]) -> Result<f64>,
{
    for g in groups.iter_mut() {
        g.zero_grad();
    }
    let base_loss = objective(groups)?;
    let floor = opts.floor * base_loss.abs().max(1.0);
    let analytic: Vec<Vec<Vec<f64>>> = groups
        .iter()
        .map(|g| g.params.iter().map(|p| p.grad.as_slice().to_vec()).collect())
        .collect();

    let mut picker = SeededRng::new(opts.seed);
    let mut report = GradCheckReport {
        entries_checked: 0,
        max_rel_err: 0.0,
        worst: None,
        per_param: Vec::new(),
        tol: opts.tol,
    };

    for gi in 0..groups.len() {
        if groups[gi].frozen {
            continue;
        }
        for pi in 0..groups[gi].params.len() {
            let n = groups[gi].params[pi].value.len();
            let indices: Vec<usize> = if n <= opts.max_entries_per_tensor {
                (0..n).collect()
            } else {
                let mut all: Vec<usize> = (0..n).collect();
                picker.shuffle(&mut all);
                all.truncate(opts.max_entries_per_tensor);
                all.sort_unstable();
                all
            };
            let name = groups[gi].params[pi].name.clone();
            let mut worst_here = 0.0f64;
            for idx in indices {
                let orig = groups[gi].params[pi].value.as_slice()[idx];
                groups[gi].params[pi].value.as_mut_slice()[idx] = orig + opts.step;
                let plus = objective(groups)?;
                groups[gi].params[pi].value.as_mut_slice()[idx] = orig - opts.step;
                let minus = objective(groups)?;
                groups[gi].params[pi].value.as_mut_slice()[idx] = orig;

                let numeric = (plus - minus) / (2.0 * opts.step);
                let a = analytic[gi][pi][idx];
                let denom = a.abs().max(numeric.abs()).max(floor);
                let rel = (a - numeric).abs() / denom;
                report.entries_checked += 1;
                worst_here = worst_here.max(rel);
                if rel > report.max_rel_err || report.worst.is_none() {
                    report.max_rel_err = report.max_rel_err.max(rel);
                    report.worst = Some(EntryError {
                        param: name.clone(),
                        index: idx,
                        analytic: a,
                        numeric,
                        rel_err: rel,
                    });
                }
            }
            report.per_param.push((name, worst_here));
        }
    }
    // restore the analytic gradients the perturbation calls overwrote
    for (g, ga) in groups.iter_mut().zip(&analytic) {
        for (p, pa) in g.params.iter_mut().zip(ga) {
            p.grad.as_mut_slice().copy_from_slice(pa);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::layers::{dense_backward, dense_forward};
    use crate::numerics::Matrix;

    fn linear_mse_setup() -> (Vec<ParamGroup>, Matrix, Matrix) {
        let mut rng = SeededRng::new(21);
        let mut m = |r, c| {
            let d = (0..r * c).map(|_| rng.normal()).collect();
            Matrix::from_vec(r, c, d).unwrap()
        };
        let x = m(6, 4);
        let y = m(6, 3);
        let mut g = ParamGroup::new("lin");
        g.push("weight", m(4, 3));
        g.push("bias", m(1, 3));
        (vec![g], x, y)
    }

    fn linear_mse(groups: &mut [ParamGroup], x: &Matrix, y: &Matrix, corrupt: bool) -> Result<f64> {
        let w = groups[0].params[0].value.clone();
        let b = groups[0].params[1].value.clone();
        let out = dense_forward(x, &w, &b)?;
        let n = out.len() as f64;
        let diff = out.zip_map(y, |a, t| a - t)?;
        let loss = diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
        let dout = diff.map(|d| 2.0 * d / n);
        let g = dense_backward(x, &w, &dout)?;
        groups[0].params[0].grad = g.dw;
        groups[0].params[1].grad = g.db;
        if corrupt {
            groups[0].params[0].grad.as_mut_slice()[5] *= 1.1;
        }
        Ok(loss)
    }

    #[test]
    fn linear_mse_is_exact() {
        let (mut groups, x, y) = linear_mse_setup();
        let rep = grad_check(
            &mut groups,
            |g| linear_mse(g, &x, &y, false),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(rep.max_rel_err < 1e-8, "{rep}");
        assert_eq!(rep.entries_checked, 15);
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let (mut groups, x, y) = linear_mse_setup();
        let rep = grad_check(
            &mut groups,
            |g| linear_mse(g, &x, &y, true),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!rep.passed());
        let worst = rep.worst.unwrap();
        assert_eq!(worst.param, "lin.weight");
        assert_eq!(worst.index, 5);
    }

    #[test]
    fn frozen_groups_are_skipped() {
        let (mut groups, x, y) = linear_mse_setup();
        groups[0].frozen = true;
        let rep = grad_check(
            &mut groups,
            |g| linear_mse(g, &x, &y, true),
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert_eq!(rep.entries_checked, 0);
        assert!(rep.passed());
    }

    #[test]
    fn subsampling_caps_entries() {
        let (mut groups, x, y) = linear_mse_setup();
        let opts = GradCheckOptions {
            max_entries_per_tensor: 5,
            ..Default::default()
        };
        let rep = grad_check(&mut groups, |g| linear_mse(g, &x, &y, false), &opts).unwrap();
        assert_eq!(rep.entries_checked, 5 + 3);
    }
}
