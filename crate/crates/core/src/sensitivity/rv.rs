//! Robustness values: the smallest equal confounding strength
//! `C²_Y = η²_D = r` (with `|ρ| = 1`) that moves the estimate, or its
//! confidence bound, to a null value `v`.

use crate::dml::DmlEstimate;
use crate::error::{Error, Result};

use super::{check_inputs, compute_bounds, SensitivityParams};

const RV_TOL: f64 = 1e-6;
const RV_MAX_ITER: usize = 200;

/// Parameters that put `C²_Y = r` and `C²_D = r / (1 − r)`.
pub fn diagonal_params(r: f64) -> SensitivityParams {
    SensitivityParams::eta(r, r, 1.0)
}

/// Closed form `½(√(t⁴ + 4t²) − t²)` with `t = |θ̂_s − v| / S`.
///
/// Solves `|θ̂_s − v| = S·r/√(1 − r)`.
pub fn robustness_value(theta_s: f64, scale: f64, v: f64) -> Result<f64> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::NonPositive {
            what: "S",
            value: scale,
            hint: "the robustness value needs a positive scale".into(),
        });
    }
    if !theta_s.is_finite() || !v.is_finite() {
        return Err(Error::NonFinite("robustness value inputs".into()));
    }
    let t2 = ((theta_s - v) / scale).powi(2);
    // Written as 2t²/(√(t⁴+4t²)+t²) to avoid cancellation for small t.
    if t2 == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * t2 / ((t2 * t2 + 4.0 * t2).sqrt() + t2))
}

/// Smallest `r` at which the one-sided confidence bound with level `1 − a`
/// on the side of `θ̂_s` away from `v` reaches `v`. Zero when it already
/// does at `r = 0`. Found by bisection to `1e-6`.
pub fn rv_a(theta: &DmlEstimate, sigma2: &DmlEstimate, nu2: &DmlEstimate, v: f64, a: f64) -> Result<f64> {
    check_inputs(theta, sigma2, nu2)?;
    let above = theta.value >= v;
    // Positive while the bound has not reached v.
    let gap = |r: f64| -> Result<f64> {
        let b = compute_bounds(theta, sigma2, nu2, &diagonal_params(r), a)?;
        Ok(if above { b.conf_lower - v } else { v - b.conf_upper })
    };
    if gap(0.0)? <= 0.0 {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = 1.0 - 1e-12;
    if gap(hi)? > 0.0 {
        return Err(Error::Degenerate("confidence bound does not reach the null value".into()));
    }
    for _ in 0..RV_MAX_ITER {
        if hi - lo <= RV_TOL {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if gap(mid)? > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}
