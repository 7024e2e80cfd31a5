//! Central finite-difference checks of reverse-mode gradients.

use rand::seq::index::sample;

use super::{Result, Tensor, TensorError};
use crate::rng::{stream, streams};

#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub eps: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Relative error is `|a - n| / max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many coordinates per input, sampled without
    /// replacement. `None` checks all of them.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Multiplies the analytic gradient before comparison. Anything other
    /// than 1.0 is a negative control.
    pub analytic_scale: f64,
    /// A mismatching coordinate whose one-sided differences disagree by more
    /// than this fraction is skipped instead of failed: the step crossed a
    /// kink (relu, argmax) and the central difference is meaningless there.
    pub kink_tol: Option<f64>,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
            max_coords: None,
            seed: 0,
            analytic_scale: 1.0,
            kink_tol: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CoordMismatch {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// Mismatches dropped as non-smooth.
    pub skipped: usize,
    /// Coordinates above tolerance.
    pub failures: Vec<CoordMismatch>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Compares `d f / d inputs` from [`Tensor::backward`] with
/// `(f(x + eps e) - f(x - eps e)) / 2 eps` for each checked coordinate.
pub fn gradcheck<F>(name: &str, f: F, inputs: &[Tensor], opts: &GradcheckOptions) -> Result<GradcheckReport>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if opts.eps <= 0.0 {
        return Err(TensorError::Invalid {
            op: "gradcheck",
            msg: "eps must be positive".into(),
        });
    }
    let tracked: Vec<Tensor> = inputs.iter().map(Tensor::to_param).collect();
    let out = f(&tracked)?;
    out.backward()?;
    let analytic: Vec<Vec<f64>> = tracked
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let mut rng = stream(opts.seed, streams::GRADCHECK);
    let mut report = GradcheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        skipped: 0,
        failures: Vec::new(),
    };
    let base: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().to_vec()).collect();
    let eval = |which: usize, index: usize, delta: f64| -> Result<f64> {
        let args: Vec<Tensor> = inputs
            .iter()
            .enumerate()
            .map(|(i, t)| {
                if i == which {
                    let mut d = base[i].clone();
                    d[index] += delta;
                    Tensor::new(d, t.shape())
                } else {
                    Ok(t.detach())
                }
            })
            .collect::<Result<_>>()?;
        Ok(f(&args)?.item())
    };

    for (which, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for index in coords {
            let (up, down) = (eval(which, index, opts.eps)?, eval(which, index, -opts.eps)?);
            let numeric = (up - down) / (2.0 * opts.eps);
            let a = analytic[which][index] * opts.analytic_scale;
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            if rel > opts.tol {
                if let Some(k) = opts.kink_tol {
                    let mid = eval(which, index, 0.0)?;
                    let (fwd, bwd) = ((up - mid) / opts.eps, (mid - down) / opts.eps);
                    if (fwd - bwd).abs() > k * fwd.abs().max(bwd.abs()).max(opts.floor) {
                        report.skipped += 1;
                        continue;
                    }
                }
            }
            report.checked += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            report.max_rel_error = report.max_rel_error.max(rel);
            if rel > opts.tol {
                report.failures.push(CoordMismatch {
                    input: which,
                    index,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
