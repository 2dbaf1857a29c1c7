//! Token importance coefficients from raw attribution scores.
//!
//! Scores are turned into magnitudes, clipped to the Tukey fences
//! `[Q1 - k·IQR, Q3 + k·IQR]` (quartiles by linear interpolation on the
//! sorted sample), and normalized to sum to one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IQR_MULTIPLIER: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QuartileMethod {
    LinearInterpolation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityVector {
    pub raw: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub clipped: Vec<f64>,
    pub lambda: Vec<f64>,
    pub iqr_multiplier: f64,
    pub quartile_method: QuartileMethod,
}

/// Quantile `p ∈ [0, 1]` of already-sorted data, linear interpolation
/// between order statistics at position `(n - 1)·p`.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = (sorted.len() - 1) as f64 * p;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Lower and upper clipping fences.
pub fn iqr_bounds(scores: &[f64], k: f64) -> Result<(f64, f64)> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot clip an empty score vector".into(),
        ));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("sensitivity scores"));
    }
    if !(k.is_finite() && k >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "iqr multiplier must be >= 0, got {k}"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let iqr = q3 - q1;
    Ok((q1 - k * iqr, q3 + k * iqr))
}

pub fn iqr_clip(scores: &[f64], k: f64) -> Result<Vec<f64>> {
    let (lo, hi) = iqr_bounds(scores, k)?;
    Ok(scores.iter().map(|v| v.clamp(lo, hi)).collect())
}

/// `λ_i = c_i / Σ c_j`, uniform when the sum is zero.
pub fn normalize_lambda(clipped: &[f64]) -> Result<Vec<f64>> {
    if clipped.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot normalize an empty vector".into(),
        ));
    }
    if clipped.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clipped scores"));
    }
    if clipped.iter().any(|v| *v < 0.0) {
        return Err(Error::InvalidArgument(
            "importance scores must be non-negative".into(),
        ));
    }
    let total: f64 = clipped.iter().sum();
    if total == 0.0 {
        let n = clipped.len() as f64;
        return Ok(vec![1.0 / n; clipped.len()]);
    }
    Ok(clipped.iter().map(|v| v / total).collect())
}

pub fn build_sensitivity(raw: &[f64], k: f64) -> Result<SensitivityVector> {
    let magnitude: Vec<f64> = raw.iter().map(|v| v.abs()).collect();
    let clipped = iqr_clip(&magnitude, k)?;
    let lambda = normalize_lambda(&clipped)?;
    Ok(SensitivityVector {
        raw: raw.to_vec(),
        magnitude,
        clipped,
        lambda,
        iqr_multiplier: k,
        quartile_method: QuartileMethod::LinearInterpolation,
    })
}

pub fn uniform_lambda(tokens: usize) -> Vec<f64> {
    vec![1.0 / tokens as f64; tokens]
}
