//! Integrated-gradients attribution of the quantization-induced output gap.
//!
//! The attributed function is the distortion scalar
//! `L(x) = mean_{h,t} |f(x, w) - f(x, w_q)|_{h,t}`, where `w_q` are the
//! quantized weights and activations stay in full precision. Activation
//! quantization only enters through the path baseline `x_q`.
//!
//! Path integrals use the midpoint rule with nodes `(k - 1/2) / steps`.
//! Step gradients are evaluated in parallel and summed in step order, so
//! results do not depend on scheduling.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizers::fake_quantize;
use crate::tensor::Matrix;
use crate::toyblock::{block_forward, BlockModel, QuantizedExecution, ScalarObjective};

pub const DEFAULT_IG_STEPS: usize = 32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionError {
    pub per_token: Vec<f64>,
    pub scalar: f64,
}

/// Per-token mean absolute output gap.
pub fn distortion_error(y_fp: &Matrix, y_q: &Matrix) -> Result<DistortionError> {
    y_fp.ensure_same_shape(y_q)?;
    let (m, t) = y_fp.shape();
    let mut per_token = vec![0.0; t];
    for h in 0..m {
        for (acc, (a, b)) in per_token.iter_mut().zip(y_fp.row(h).iter().zip(y_q.row(h))) {
            *acc += (a - b).abs();
        }
    }
    for v in &mut per_token {
        *v /= m as f64;
    }
    let scalar = per_token.iter().sum::<f64>() / t as f64;
    Ok(DistortionError { per_token, scalar })
}

/// `L(x)` for a full-precision block and its weight-quantized twin.
#[derive(Debug, Clone)]
pub struct DistortionObjective {
    reference: BlockModel,
    quantized: BlockModel,
}

impl DistortionObjective {
    pub fn new(model: &BlockModel, exec: &QuantizedExecution) -> Result<Self> {
        Ok(Self {
            reference: model.clone(),
            quantized: exec.weight_quantized_model(model)?,
        })
    }

    pub fn from_models(reference: BlockModel, quantized: BlockModel) -> Result<Self> {
        if reference.kind() != quantized.kind()
            || reference.input_dim() != quantized.input_dim()
            || reference.output_dim() != quantized.output_dim()
        {
            return Err(Error::Shape(
                "reference and quantized blocks differ in structure".into(),
            ));
        }
        Ok(Self {
            reference,
            quantized,
        })
    }

    pub fn reference(&self) -> &BlockModel {
        &self.reference
    }

    pub fn quantized(&self) -> &BlockModel {
        &self.quantized
    }

    /// Pre-absolute-value output gap `f(x, w) - f(x, w_q)`.
    pub fn output_gap(&self, x: &Matrix) -> Result<Matrix> {
        block_forward(&self.reference, x)?.sub(&block_forward(&self.quantized, x)?)
    }

    pub fn distortion(&self, x: &Matrix) -> Result<DistortionError> {
        distortion_error(
            &block_forward(&self.reference, x)?,
            &block_forward(&self.quantized, x)?,
        )
    }
}

impl ScalarObjective for DistortionObjective {
    fn value(&self, x: &Matrix) -> Result<f64> {
        Ok(self.distortion(x)?.scalar)
    }

    /// Reverse-mode through the difference function; `d|u|/du = 0` at `u = 0`.
    fn gradient(&self, x: &Matrix) -> Result<Matrix> {
        let gap = self.output_gap(x)?;
        gap.ensure_finite("block output")?;
        let norm = 1.0 / (gap.rows() * gap.cols()) as f64;
        let upstream = gap.map(|u| {
            if u > 0.0 {
                norm
            } else if u < 0.0 {
                -norm
            } else {
                0.0
            }
        });
        let g = self
            .reference
            .backward(x, &upstream)?
            .sub(&self.quantized.backward(x, &upstream)?)?;
        g.ensure_finite("input gradient")?;
        Ok(g)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineKind {
    QuantizedInput,
    Zero,
    Custom,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttributionResult {
    /// Column sums of `per_element`, one per token.
    pub per_token_scores: Vec<f64>,
    pub per_element: Matrix,
    pub steps: usize,
    pub baseline_kind: BaselineKind,
    /// Absolute completeness residual.
    pub residual: f64,
    pub value_at_input: f64,
    pub value_at_baseline: f64,
}

impl AttributionResult {
    /// Residual divided by the attributed change `|L(x) - L(x')|`.
    pub fn relative_residual(&self) -> f64 {
        let gap = (self.value_at_input - self.value_at_baseline).abs();
        if gap == 0.0 {
            if self.residual == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.residual / gap
        }
    }
}

/// Midpoint-rule integrated gradients of `objective` from `baseline` to `x`.
pub fn integrated_gradients<O: ScalarObjective + ?Sized>(
    objective: &O,
    x: &Matrix,
    baseline: &Matrix,
    steps: usize,
) -> Result<AttributionResult> {
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    x.ensure_same_shape(baseline)?;
    x.ensure_finite("attribution input")?;
    baseline.ensure_finite("attribution baseline")?;
    let delta = x.sub(baseline)?;
    let grads: Vec<Result<Matrix>> = (1..=steps)
        .into_par_iter()
        .map(|k| {
            let alpha = (k as f64 - 0.5) / steps as f64;
            let point = baseline.add(&delta.scale(alpha))?;
            objective.gradient(&point)
        })
        .collect();
    let mut sum = Matrix::zeros(x.rows(), x.cols());
    for g in grads {
        let g = g?;
        sum = sum.add(&g)?;
    }
    if !sum.is_finite() {
        return Err(Error::NonFinite("path gradients"));
    }
    let mean = sum.scale(1.0 / steps as f64);
    let per_element = delta.zip_map(&mean, |d, g| d * g)?;
    let per_token_scores = per_element.column_sums();
    let value_at_input = objective.value(x)?;
    let value_at_baseline = objective.value(baseline)?;
    let mut result = AttributionResult {
        per_token_scores,
        per_element,
        steps,
        baseline_kind: BaselineKind::Custom,
        residual: 0.0,
        value_at_input,
        value_at_baseline,
    };
    result.residual = completeness_check(&result, value_at_input, value_at_baseline);
    Ok(result)
}

/// Path baseline for quantization-aware attribution: the fake-quantized
/// input under activation quantization, the zero matrix otherwise.
pub fn qig_baseline(exec: &QuantizedExecution, x: &Matrix) -> Result<(Matrix, BaselineKind)> {
    match &exec.act_cfg {
        Some(cfg) => Ok((fake_quantize(x, cfg)?, BaselineKind::QuantizedInput)),
        None => Ok((Matrix::zeros(x.rows(), x.cols()), BaselineKind::Zero)),
    }
}

/// Quantization-aware integrated gradients for one `d × T` input.
pub fn qig(
    model: &BlockModel,
    exec: &QuantizedExecution,
    x: &Matrix,
    steps: usize,
) -> Result<AttributionResult> {
    let objective = DistortionObjective::new(model, exec)?;
    let (baseline, kind) = qig_baseline(exec, x)?;
    let mut result = integrated_gradients(&objective, x, &baseline, steps)?;
    result.baseline_kind = kind;
    Ok(result)
}

/// Attributes each batch item independently and averages per-token scores.
pub fn qig_batched(
    model: &BlockModel,
    exec: &QuantizedExecution,
    batch: &[Matrix],
    steps: usize,
) -> Result<(Vec<f64>, Vec<AttributionResult>)> {
    let first = batch
        .first()
        .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let results = batch
        .iter()
        .map(|x| {
            x.ensure_same_shape(first)?;
            qig(model, exec, x, steps)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; first.cols()];
    for r in &results {
        for (m, s) in mean.iter_mut().zip(&r.per_token_scores) {
            *m += s;
        }
    }
    for m in &mut mean {
        *m /= results.len() as f64;
    }
    Ok((mean, results))
}

/// `|sum_i score_i - (L(x) - L(baseline))|`.
pub fn completeness_check(
    result: &AttributionResult,
    value_at_x: f64,
    value_at_baseline: f64,
) -> f64 {
    let total: f64 = result.per_token_scores.iter().sum();
    (total - (value_at_x - value_at_baseline)).abs()
}

/// Perturbation oracle: `|L(x) - L(x with token i reset to its baseline)|`.
pub fn leave_one_out_sensitivity(
    model: &BlockModel,
    exec: &QuantizedExecution,
    x: &Matrix,
) -> Result<Vec<f64>> {
    let objective = DistortionObjective::new(model, exec)?;
    let (baseline, _) = qig_baseline(exec, x)?;
    let full = objective.value(x)?;
    (0..x.cols())
        .into_par_iter()
        .map(|i| {
            let mut perturbed = x.clone();
            perturbed.set_column(i, &baseline.column(i));
            Ok((full - objective.value(&perturbed)?).abs())
        })
        .collect()
}

/// Analytic against central-difference gradients of the distortion scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientCheck {
    pub analytic: Matrix,
    pub numeric: Matrix,
    /// Coordinates left out because the absolute value is not smooth there.
    pub excluded: Vec<(usize, usize)>,
    /// `max |analytic - numeric| / max |numeric|` over kept coordinates.
    pub relative_error: f64,
}

/// Compares gradients, skipping input coordinates whose ±`epsilon` probe
/// touches an output gap entry below `kink_tol` in magnitude or flips the
/// sign of any gap entry.
pub fn gradient_check(
    objective: &DistortionObjective,
    x: &Matrix,
    epsilon: f64,
    kink_tol: f64,
) -> Result<GradientCheck> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let analytic = objective.gradient(x)?;
    let centre = objective.output_gap(x)?;
    let mean_abs =
        |g: &Matrix| g.as_slice().iter().map(|v| v.abs()).sum::<f64>() / g.as_slice().len() as f64;
    // a kink is an entry the probe moves that sits near zero or changes sign
    let kinked = |plus: &Matrix, minus: &Matrix| {
        centre
            .as_slice()
            .iter()
            .zip(plus.as_slice().iter().zip(minus.as_slice()))
            .any(|(&c, (&p, &m))| {
                (p != c || m != c)
                    && (c.abs() < kink_tol || p.signum() != c.signum() || m.signum() != c.signum())
            })
    };
    let mut numeric = Matrix::zeros(x.rows(), x.cols());
    let mut excluded = Vec::new();
    let mut probe = x.clone();
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let orig = x[(r, c)];
            probe[(r, c)] = orig + epsilon;
            let plus = objective.output_gap(&probe)?;
            probe[(r, c)] = orig - epsilon;
            let minus = objective.output_gap(&probe)?;
            probe[(r, c)] = orig;
            numeric[(r, c)] = (mean_abs(&plus) - mean_abs(&minus)) / (2.0 * epsilon);
            if kinked(&plus, &minus) {
                excluded.push((r, c));
            }
        }
    }
    let mut diff = 0.0f64;
    let mut scale = 0.0f64;
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            if excluded.binary_search(&(r, c)).is_ok() {
                continue;
            }
            diff = diff.max((analytic[(r, c)] - numeric[(r, c)]).abs());
            scale = scale.max(numeric[(r, c)].abs());
        }
    }
    let relative_error = if scale > 0.0 { diff / scale } else { diff };
    Ok(GradientCheck {
        analytic,
        numeric,
        excluded,
        relative_error,
    })
}
