//! Central-difference gradient verification.

use crate::error::{Error, Result};

/// Denominator floor for the relative error, so coordinates with vanishing
/// gradients are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

/// Compares `analytic[c]` against `(f(theta + eps e_c) - f(theta - eps e_c)) / 2 eps`
/// for every `c` in `coords`. The loss is evaluated twice at `theta` first; any
/// difference means the forward is not deterministic and is reported as an error.
pub fn grad_check<F>(mut f: F, theta: &[f64], analytic: &[f64], coords: &[usize], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> f64,
{
    if theta.len() != analytic.len() {
        return Err(Error::arg("gradient length does not match parameters"));
    }
    let base = f(theta);
    let again = f(theta);
    if base.to_bits() != again.to_bits() {
        return Err(Error::Numeric(format!("forward is not deterministic: {base} vs {again}")));
    }
    let mut work = theta.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coord: 0, analytic: 0.0, numeric: 0.0, checked: 0 };
    for &c in coords {
        if c >= theta.len() {
            return Err(Error::arg(format!("coordinate {c} out of range")));
        }
        work[c] = theta[c] + eps;
        let up = f(&work);
        work[c] = theta[c] - eps;
        let down = f(&work);
        work[c] = theta[c];
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[c], numeric);
        if !err.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient check at coordinate {c}")));
        }
        if err >= report.max_rel_error {
            report = GradCheckReport { max_rel_error: err, worst_coord: c, analytic: analytic[c], numeric, checked: 0 };
        }
        report.checked += 1;
    }
    report.checked = coords.len();
    Ok(report)
}
