//! Central finite-difference gradient checking in 64-bit.

use super::tensor::Tensor;
use crate::error::Result;

/// Default perturbation for [`finite_diff_check`].
pub const DEFAULT_STEP: f64 = 1e-4;

/// Errors at or below this are accepted without any kink analysis.
pub const SUSPECT_RELATIVE_ERROR: f64 = 1e-6;

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// Entries compared.
    pub checked: usize,
    /// Entries skipped because the loss has a kink there (e.g. relu input at 0).
    pub excluded: usize,
    /// `(parameter index, flat entry index)` of the largest error.
    pub worst: Option<(usize, usize)>,
}

/// Compares the analytic gradient returned by `loss_fn` against central
/// differences `(f(θ+h) − f(θ−h)) / 2h`, entry by entry.
///
/// Relative error per entry is `|a − n| / max(|a|, |n|, 1e-8)`. An entry whose
/// error exceeds [`SUSPECT_RELATIVE_ERROR`] is excluded as a kink when the
/// one-sided slopes differ by at least the analytic/numeric gap and that
/// difference does not scale with the step. For a smooth loss the slope
/// difference is `f''·step`, so halving the step halves it; a slope
/// discontinuity inside `±step` breaks that ratio either way (it stays O(1)
/// when the kink is within `step/2`, and vanishes when it lies beyond).
pub fn finite_diff_check<F>(loss_fn: F, params: &[Tensor<f64>], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let (f0, analytic) = loss_fn(params)?;
    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        checked: 0,
        excluded: 0,
        worst: None,
    };
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    for p in 0..params.len() {
        for e in 0..params[p].numel() {
            let orig = params[p].data()[e];
            work[p].data_mut()[e] = orig + step;
            let (fp, _) = loss_fn(&work)?;
            work[p].data_mut()[e] = orig - step;
            let (fm, _) = loss_fn(&work)?;
            work[p].data_mut()[e] = orig;

            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[p].data()[e];
            let gap = (a - numeric).abs();
            let rel = gap / a.abs().max(numeric.abs()).max(1e-8);
            if rel > SUSPECT_RELATIVE_ERROR {
                let jump = ((fp - f0) - (f0 - fm)).abs() / step;
                if jump >= gap {
                    let half = step / 2.0;
                    work[p].data_mut()[e] = orig + half;
                    let (fph, _) = loss_fn(&work)?;
                    work[p].data_mut()[e] = orig - half;
                    let (fmh, _) = loss_fn(&work)?;
                    work[p].data_mut()[e] = orig;
                    let jump_half = ((fph - f0) - (f0 - fmh)).abs() / half;
                    let ratio = jump_half / jump;
                    if !(0.3..=0.7).contains(&ratio) {
                        report.excluded += 1;
                        continue;
                    }
                }
            }
            report.checked += 1;
            if rel > report.max_relative_error {
                report.max_relative_error = rel;
                report.worst = Some((p, e));
            }
        }
    }
    Ok(report)
}
