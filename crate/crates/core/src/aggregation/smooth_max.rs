//! Smooth approximations of the maximum obtained by aggregating `tau(x)` and
//! inverting `tau` afterwards.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmoothMaxMode {
    /// `(sum x_i^p)^(1/p)` on strictly positive values.
    Power,
    /// `(1/p) ln sum exp(p x_i)` on any real values.
    LogSumExp,
}

/// Smooth maximum of `values` with sharpness `p >= 1`.
///
/// Both modes factor out the largest value first, so `p * x` may exceed
/// the range of `exp` / `powf` without overflowing. The result lies in
/// `[max, max * n^(1/p)]` (power) or `[max, max + ln(n) / p]` (log-sum-exp).
pub fn power_max_approx(values: &[f64], p: f64, mode: SmoothMaxMode) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::contract("smooth maximum of an empty set"));
    }
    if !(p >= 1.0 && p.is_finite()) {
        return Err(Error::Domain {
            op: "power_max_approx",
            detail: format!("exponent must be finite and at least 1, got {p}"),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain {
            op: "power_max_approx",
            detail: "non-finite value".into(),
        });
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    match mode {
        SmoothMaxMode::Power => {
            if let Some(bad) = values.iter().find(|&&v| v <= 0.0) {
                return Err(Error::Domain {
                    op: "power_max_approx",
                    detail: format!("power mode needs positive values, got {bad}"),
                });
            }
            let s: f64 = values.iter().map(|v| (v / max).powf(p)).sum();
            Ok(max * s.powf(1.0 / p))
        }
        SmoothMaxMode::LogSumExp => {
            let s: f64 = values.iter().map(|v| (p * (v - max)).exp()).sum();
            Ok(max + s.ln() / p)
        }
    }
}
