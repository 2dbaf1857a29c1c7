//! Column-sequential second-order weight quantization with a token-weighted
//! Hessian `H' = Σ_i λ_i X_i X_iᵀ`.
//!
//! Columns are processed in natural order. Scales and zero-points are fixed
//! up front from the unmodified weights; only the codes follow the error
//! propagation. With uniform `λ` this is standard GPTQ up to a scalar factor
//! on the Hessian, which cancels in every update ratio.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::quantizers::{dequantize, quantize, QuantConfig, QuantizedTensor};
use crate::tensor::Matrix;

pub const DEFAULT_DAMPING: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct WeightedHessian {
    pub matrix: Matrix,
    /// Fraction of the mean diagonal added to the diagonal.
    pub damping: f64,
    pub lambda: Vec<f64>,
}

/// Lower-triangular `L` with `a = L Lᵀ`.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return Err(Error::Shape("cholesky needs a square matrix".into()));
    }
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut diag = a[(j, j)];
        for k in 0..j {
            diag -= l[(j, k)] * l[(j, k)];
        }
        if !(diag > 0.0 && diag.is_finite()) {
            return Err(Error::Cholesky {
                pivot: j,
                value: diag,
            });
        }
        let ljj = diag.sqrt();
        l[(j, j)] = ljj;
        for i in j + 1..n {
            let mut v = a[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = v / ljj;
        }
    }
    Ok(l)
}

/// Inverse of a symmetric positive-definite matrix from its Cholesky factor.
pub fn spd_inverse(a: &Matrix) -> Result<Matrix> {
    let l = cholesky(a)?;
    let n = l.rows();
    // forward substitution for L⁻¹
    let mut l_inv = Matrix::zeros(n, n);
    for col in 0..n {
        for i in col..n {
            let mut v = if i == col { 1.0 } else { 0.0 };
            for k in col..i {
                v -= l[(i, k)] * l_inv[(k, col)];
            }
            l_inv[(i, col)] = v / l[(i, i)];
        }
    }
    let mut inv = l_inv.t_matmul(&l_inv)?;
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = v;
            inv[(j, i)] = v;
        }
    }
    Ok(inv)
}

/// `Σ_i λ_i X_i X_iᵀ` plus `damping_frac · mean(diag)` on the diagonal.
pub fn weighted_hessian(x: &Matrix, lambda: &[f64], damping_frac: f64) -> Result<WeightedHessian> {
    if lambda.len() != x.cols() {
        return Err(Error::Shape(format!(
            "{} token weights for {} tokens",
            lambda.len(),
            x.cols()
        )));
    }
    if lambda.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::InvalidArgument(
            "token weights must be non-negative".into(),
        ));
    }
    if !(damping_frac.is_finite() && damping_frac >= 0.0) {
        return Err(Error::InvalidArgument(
            "damping must be non-negative".into(),
        ));
    }
    x.ensure_finite("calibration activations")?;
    let d = x.rows();
    let mut h = Matrix::zeros(d, d);
    for a in 0..d {
        for b in a..d {
            let v: f64 = x
                .row(a)
                .iter()
                .zip(x.row(b))
                .zip(lambda)
                .map(|((xa, xb), l)| l * xa * xb)
                .sum();
            h[(a, b)] = v;
            h[(b, a)] = v;
        }
    }
    let mean_diag = (0..d).map(|i| h[(i, i)]).sum::<f64>() / d as f64;
    for i in 0..d {
        h[(i, i)] += damping_frac * mean_diag;
    }
    cholesky(&h)?;
    Ok(WeightedHessian {
        matrix: h,
        damping: damping_frac,
        lambda: lambda.to_vec(),
    })
}

/// Plain round-to-nearest quantization, no error compensation.
pub fn rtn_quantize(w: &Matrix, wcfg: &QuantConfig) -> Result<QuantizedTensor> {
    quantize(w, wcfg)
}

/// GPTQ codes for `w` (`m × d`) under the Hessian `h` (`d × d`).
pub fn gptq_codes(w: &Matrix, h: &Matrix, wcfg: &QuantConfig) -> Result<QuantizedTensor> {
    let (m, d) = w.shape();
    if h.shape() != (d, d) {
        return Err(Error::Shape(format!(
            "hessian is {}x{}, weight has {d} columns",
            h.rows(),
            h.cols()
        )));
    }
    // Static group parameters from the unmodified weights.
    let mut q = quantize(w, wcfg)?;
    // Upper factor U of H⁻¹ = UᵀU; row j holds the propagation coefficients.
    let u = cholesky(&spd_inverse(h)?)?.transpose();
    let mut work = w.clone();
    for j in 0..d {
        let pivot = u[(j, j)];
        for r in 0..m {
            let g = q.group_of(r, j);
            let code = q.encode(work[(r, j)], g);
            q.codes[r * d + j] = code;
            let err = (work[(r, j)] - q.decode(code, g)) / pivot;
            for k in j + 1..d {
                work[(r, k)] -= err * u[(j, k)];
            }
        }
    }
    Ok(q)
}

/// Squared output error `‖(W − Ŵ) X_i‖²` of every token.
pub fn per_token_reconstruction_errors(w: &Matrix, w_hat: &Matrix, x: &Matrix) -> Result<Vec<f64>> {
    let diff = w.sub(w_hat)?.matmul(x)?;
    let mut errors = vec![0.0; x.cols()];
    for r in 0..diff.rows() {
        for (acc, v) in errors.iter_mut().zip(diff.row(r)) {
            *acc += v * v;
        }
    }
    Ok(errors)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptqReport {
    pub weighted_error: f64,
    pub per_token_errors: Vec<f64>,
    pub rtn_weighted_error: f64,
    pub rtn_per_token_errors: Vec<f64>,
    pub damping: f64,
}

/// GPTQ with a comparison against RTN on the calibration tokens `x`.
pub fn gptq_quantize(
    w: &Matrix,
    hessian: &WeightedHessian,
    x: &Matrix,
    wcfg: &QuantConfig,
) -> Result<(QuantizedTensor, GptqReport)> {
    if x.rows() != w.cols() || x.cols() != hessian.lambda.len() {
        return Err(Error::Shape(
            "calibration input does not match weight/hessian".into(),
        ));
    }
    let q = gptq_codes(w, &hessian.matrix, wcfg)?;
    let per_token = per_token_reconstruction_errors(w, &dequantize(&q)?, x)?;
    let rtn_per_token =
        per_token_reconstruction_errors(w, &dequantize(&rtn_quantize(w, wcfg)?)?, x)?;
    let weigh =
        |errs: &[f64]| -> f64 { errs.iter().zip(&hessian.lambda).map(|(e, l)| l * e).sum() };
    let report = GptqReport {
        weighted_error: weigh(&per_token),
        rtn_weighted_error: weigh(&rtn_per_token),
        per_token_errors: per_token,
        rtn_per_token_errors: rtn_per_token,
        damping: hessian.damping,
    };
    Ok((q, report))
}
