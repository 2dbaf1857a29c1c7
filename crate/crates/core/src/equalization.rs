//! Token-weighted channel-wise equalization.
//!
//! For a linear layer `W` (`m × d`) with calibration input `X` (`d × T`) the
//! search picks per-channel scales `E` minimizing
//!
//! ```text
//! Σ_i λ_i ‖ Q_W(W * E) · Q_X(E⁻¹ * X_i) − W X_i ‖²
//! ```
//!
//! where `W * E` scales column `c` of `W` by `E_c` and `E⁻¹ * X` scales row
//! `c` of `X` by `1 / E_c`. Without an activation format the `Q_X` step is
//! skipped. Candidates come from the power family
//! `E(α)_c = max_t |X_{c,t}|^α / max_r |W_{r,c}|^(1-α)` on a uniform α grid,
//! plus the identity.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizers::{fake_quantize, QuantConfig};
use crate::tensor::Matrix;
use crate::toyblock::{BlockModel, QuantizedBlock, QuantizedExecution};

pub const DEFAULT_GRID_SIZE: usize = 21;
pub const SCALE_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    /// `None` for the identity candidate.
    pub alpha: Option<f64>,
    pub weighted_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EqualizationResult {
    pub scales: Vec<f64>,
    pub weighted_error: f64,
    /// Winning grid parameter, `None` when the identity won.
    pub alpha: Option<f64>,
    /// Grid candidates in ascending α, then the identity.
    pub trace: Vec<TraceEntry>,
    pub lambda_used: Vec<f64>,
}

impl EqualizationResult {
    pub fn identity_error(&self) -> f64 {
        self.trace
            .iter()
            .find(|t| t.alpha.is_none())
            .map(|t| t.weighted_error)
            .expect("identity is always evaluated")
    }
}

fn check_problem(w: &Matrix, x: &Matrix, e: &[f64], weights: &[f64]) -> Result<()> {
    if w.cols() != x.rows() {
        return Err(Error::Shape(format!(
            "weight has {} inputs, activation has {} channels",
            w.cols(),
            x.rows()
        )));
    }
    if e.len() != w.cols() {
        return Err(Error::Shape(format!(
            "{} scales for {} channels",
            e.len(),
            w.cols()
        )));
    }
    if weights.len() != x.cols() {
        return Err(Error::Shape(format!(
            "{} token weights for {} tokens",
            weights.len(),
            x.cols()
        )));
    }
    if e.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::InvalidArgument(
            "equalization scales must be positive and finite".into(),
        ));
    }
    if weights.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "token weights must be non-negative".into(),
        ));
    }
    Ok(())
}

/// Squared reconstruction error of each token column under scales `e`.
/// With neither format set the scaling cancels and every error is 0.
pub fn per_token_errors(
    w: &Matrix,
    x: &Matrix,
    e: &[f64],
    wcfg: Option<&QuantConfig>,
    acfg: Option<&QuantConfig>,
) -> Result<Vec<f64>> {
    if wcfg.is_none() && acfg.is_none() {
        return Ok(vec![0.0; x.cols()]);
    }
    let reference = w.matmul(x)?;
    let scaled_w = w.scale_columns(e)?;
    let wq = match wcfg {
        Some(cfg) => fake_quantize(&scaled_w, cfg)?,
        None => scaled_w,
    };
    let inv: Vec<f64> = e.iter().map(|v| 1.0 / v).collect();
    let scaled_x = x.scale_rows(&inv)?;
    let xq = match acfg {
        Some(cfg) => fake_quantize(&scaled_x, cfg)?,
        None => scaled_x,
    };
    let diff = wq.matmul(&xq)?.sub(&reference)?;
    let mut errors = vec![0.0; x.cols()];
    for r in 0..diff.rows() {
        for (acc, v) in errors.iter_mut().zip(diff.row(r)) {
            *acc += v * v;
        }
    }
    Ok(errors)
}

fn weighted_sum(errors: &[f64], weights: &[f64]) -> f64 {
    errors.iter().zip(weights).map(|(e, l)| l * e).sum()
}

/// Token-weighted error with both weights and activations quantized.
pub fn weighted_objective_wa(
    w: &Matrix,
    x: &Matrix,
    e: &[f64],
    lambda: &[f64],
    wcfg: Option<&QuantConfig>,
    acfg: Option<&QuantConfig>,
) -> Result<f64> {
    check_problem(w, x, e, lambda)?;
    Ok(weighted_sum(
        &per_token_errors(w, x, e, wcfg, acfg)?,
        lambda,
    ))
}

/// Token-weighted error with activations in full precision.
pub fn weighted_objective_weight_only(
    w: &Matrix,
    x: &Matrix,
    e: &[f64],
    lambda: &[f64],
    wcfg: Option<&QuantConfig>,
) -> Result<f64> {
    weighted_objective_wa(w, x, e, lambda, wcfg, None)
}

/// Candidate scale vectors in grid order. Channels with no activation
/// (or no weight) mass are pinned to 1.
pub fn candidate_scales(w: &Matrix, x: &Matrix, grid_size: usize) -> Result<Vec<(f64, Vec<f64>)>> {
    if grid_size < 2 {
        return Err(Error::InvalidArgument(
            "grid_size must be at least 2".into(),
        ));
    }
    if w.cols() != x.rows() {
        return Err(Error::Shape("weight/activation channel mismatch".into()));
    }
    let d = w.cols();
    let x_max: Vec<f64> = (0..d)
        .map(|c| x.row(c).iter().fold(0.0f64, |m, v| m.max(v.abs())))
        .collect();
    let w_max: Vec<f64> = (0..d)
        .map(|c| (0..w.rows()).fold(0.0f64, |m, r| m.max(w[(r, c)].abs())))
        .collect();
    let pinned: Vec<bool> = (0..d).map(|c| x_max[c] == 0.0 || w_max[c] == 0.0).collect();

    let mut out = Vec::with_capacity(grid_size);
    for k in 0..grid_size {
        let alpha = k as f64 / (grid_size - 1) as f64;
        let mut e: Vec<f64> = (0..d)
            .map(|c| (x_max[c].powf(alpha) / w_max[c].powf(1.0 - alpha)).max(SCALE_FLOOR))
            .collect();
        let (lo, hi) = e
            .iter()
            .zip(&pinned)
            .filter(|(v, p)| !**p && v.is_finite())
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), (v, _)| {
                (lo.min(*v), hi.max(*v))
            });
        let norm = if hi > 0.0 { (lo * hi).sqrt() } else { 1.0 };
        for (v, p) in e.iter_mut().zip(&pinned) {
            *v = if *p { 1.0 } else { *v / norm };
        }
        out.push((alpha, e));
    }
    Ok(out)
}

/// Grid search with the token-weighted objective. `lambda` must be a
/// normalized weight vector.
pub fn search_scales(
    w: &Matrix,
    x: &Matrix,
    lambda: &[f64],
    wcfg: Option<&QuantConfig>,
    acfg: Option<&QuantConfig>,
    grid_size: usize,
) -> Result<EqualizationResult> {
    let total: f64 = lambda.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!(
            "token weights must sum to 1, got {total}"
        )));
    }
    search_with_token_weights(w, x, lambda, wcfg, acfg, grid_size)
}

/// The unweighted search (every token weight 1).
pub fn search_scales_unweighted(
    w: &Matrix,
    x: &Matrix,
    wcfg: Option<&QuantConfig>,
    acfg: Option<&QuantConfig>,
    grid_size: usize,
) -> Result<EqualizationResult> {
    search_with_token_weights(w, x, &vec![1.0; x.cols()], wcfg, acfg, grid_size)
}

fn search_with_token_weights(
    w: &Matrix,
    x: &Matrix,
    weights: &[f64],
    wcfg: Option<&QuantConfig>,
    acfg: Option<&QuantConfig>,
    grid_size: usize,
) -> Result<EqualizationResult> {
    let identity = vec![1.0; w.cols()];
    check_problem(w, x, &identity, weights)?;
    if let Some(cfg) = wcfg {
        cfg.validate()?;
    }
    if let Some(cfg) = acfg {
        cfg.validate()?;
    }
    let candidates = candidate_scales(w, x, grid_size)?;
    let errors: Vec<f64> = candidates
        .par_iter()
        .map(|(_, e)| weighted_objective_wa(w, x, e, weights, wcfg, acfg))
        .collect::<Result<Vec<_>>>()?;
    let identity_error = weighted_objective_wa(w, x, &identity, weights, wcfg, acfg)?;

    // Identity first; a grid point must be strictly better to replace it,
    // and equal grid points keep the smaller α.
    let mut best: Option<usize> = None;
    let mut best_error = identity_error;
    for (i, err) in errors.iter().enumerate() {
        if *err < best_error {
            best = Some(i);
            best_error = *err;
        }
    }
    let mut trace: Vec<TraceEntry> = candidates
        .iter()
        .zip(&errors)
        .map(|((alpha, _), err)| TraceEntry {
            alpha: Some(*alpha),
            weighted_error: *err,
        })
        .collect();
    trace.push(TraceEntry {
        alpha: None,
        weighted_error: identity_error,
    });
    let (alpha, scales) = match best {
        Some(i) => (Some(candidates[i].0), candidates[i].1.clone()),
        None => (None, identity),
    };
    Ok(EqualizationResult {
        scales,
        weighted_error: best_error,
        alpha,
        trace,
        lambda_used: weights.to_vec(),
    })
}

/// Full-precision input of every linear sub-layer on `x`.
pub fn collect_layer_inputs(model: &BlockModel, x: &Matrix) -> Result<Vec<Matrix>> {
    let mut inputs = Vec::new();
    model.forward_with(x, |_, w, input| {
        inputs.push(input.clone());
        w.matmul(input)
    })?;
    Ok(inputs)
}

/// Layer inputs of several calibration sequences, concatenated along the
/// token axis. Sequences run through the block separately.
pub fn collect_layer_inputs_batched(model: &BlockModel, batches: &[Matrix]) -> Result<Vec<Matrix>> {
    let per_batch = batches
        .iter()
        .map(|x| collect_layer_inputs(model, x))
        .collect::<Result<Vec<_>>>()?;
    let layers = model.linear_layers().len();
    (0..layers)
        .map(|l| {
            let parts: Vec<Matrix> = per_batch.iter().map(|b| b[l].clone()).collect();
            Matrix::hstack(&parts)
        })
        .collect()
}

/// Searches scales for every linear sub-layer (same `λ` for all of them)
/// and bakes them into a quantized block.
pub fn equalize_and_quantize(
    model: &BlockModel,
    x_calib: &Matrix,
    lambda: &[f64],
    wcfg: &QuantConfig,
    acfg: Option<&QuantConfig>,
) -> Result<(QuantizedBlock, Vec<EqualizationResult>)> {
    equalize_layer_inputs(
        model,
        &collect_layer_inputs(model, x_calib)?,
        lambda,
        wcfg,
        acfg,
    )
}

/// As [`equalize_and_quantize`] with precomputed full-precision layer inputs.
pub fn equalize_layer_inputs(
    model: &BlockModel,
    inputs: &[Matrix],
    lambda: &[f64],
    wcfg: &QuantConfig,
    acfg: Option<&QuantConfig>,
) -> Result<(QuantizedBlock, Vec<EqualizationResult>)> {
    let layers = model.linear_layers();
    if inputs.len() != layers.len() {
        return Err(Error::Shape(format!(
            "{} layer inputs for {} layers",
            inputs.len(),
            layers.len()
        )));
    }
    let results = layers
        .iter()
        .zip(inputs)
        .map(|(w, x)| search_scales(w, x, lambda, Some(wcfg), acfg, DEFAULT_GRID_SIZE))
        .collect::<Result<Vec<_>>>()?;
    let exec = QuantizedExecution {
        weight_cfg: Some(*wcfg),
        act_cfg: acfg.copied(),
        equalization: Some(results.iter().map(|r| r.scales.clone()).collect()),
    };
    let block = QuantizedBlock::from_execution(model, &exec)?;
    Ok((block, results))
}
