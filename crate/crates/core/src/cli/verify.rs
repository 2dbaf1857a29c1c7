//! Seeded self-check suite. Each check compares the library against a
//! straight-line oracle or a stated bound and records the measured value
//! next to its tolerance.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::commands::{
    AttributionSummary, LayerDetail, QuantizeReport, ATTRIBUTION_JSON, CALIB_FILE, MODEL_FILE,
    QUANTIZED_FILE, QUANTIZE_REPORT,
};
use super::format::{
    calibration_to_file, read_calibration, read_json, read_model, ModelFile, QuantizedModelFile,
};
use crate::attribution::{gradient_check, qig, DistortionObjective};
use crate::equalization::{search_scales, search_scales_unweighted, DEFAULT_GRID_SIZE};
use crate::error::{Error, Result};
use crate::gptq::{
    gptq_codes, gptq_quantize, per_token_reconstruction_errors, rtn_quantize, weighted_hessian,
    DEFAULT_DAMPING,
};
use crate::quantizers::{dequantize, quantize, Granularity, QuantConfig};
use crate::synth::{random_model, rng_for, standard_normal};
use crate::toyblock::{BlockKind, QuantizedExecution};
use crate::weighting::{build_sensitivity, uniform_lambda};

pub const SEEDS_PER_RUN: u64 = 5;
pub const RUNTIME_BOUND_SECONDS: f64 = 60.0;

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyArgs {
    pub base_seed: u64,
    /// Multiplies every tolerance; values below 1 tighten the suite.
    pub tolerance_scale: f64,
    /// Directory with pipeline outputs to cross-check, if any.
    pub run_dir: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub seed: Option<u64>,
    pub measured: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Reported but not gating.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub name: String,
    pub seed: u64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub base_seed: u64,
    pub tolerance_scale: f64,
    pub checks: Vec<Check>,
    pub observations: Vec<Observation>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyTiming {
    pub elapsed_seconds: f64,
    pub runtime_bound_seconds: f64,
    pub within_bound: bool,
}

struct Suite {
    scale: f64,
    checks: Vec<Check>,
    observations: Vec<Observation>,
}

impl Suite {
    /// Passes when `measured <= tolerance · scale`.
    fn check(&mut self, name: &str, seed: Option<u64>, measured: f64, tolerance: f64) {
        let tolerance = tolerance * self.scale;
        self.checks.push(Check {
            name: name.to_string(),
            seed,
            measured,
            tolerance,
            passed: measured <= tolerance,
        });
    }

    fn observe(&mut self, name: &str, seed: u64, value: f64) {
        self.observations.push(Observation {
            name: name.to_string(),
            seed,
            value,
        });
    }
}

/// Straight-line reference implementations.
mod oracle {
    use crate::tensor::Matrix;

    /// Nearest code by scanning the whole code range.
    pub fn nearest_code(v: f64, scale: f64, lo: i32, hi: i32) -> i32 {
        let mut best = lo;
        for c in lo..=hi {
            if (v - scale * c as f64).abs() < (v - scale * best as f64).abs() {
                best = c;
            }
        }
        best
    }

    /// Row-wise asymmetric fake quantization with one group per row.
    pub fn fake_quant_rows(w: &[Vec<f64>], bits: u32) -> Vec<Vec<f64>> {
        let qmax = ((1u32 << bits) - 1) as f64;
        w.iter()
            .map(|row| {
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let s = (hi - lo) / qmax;
                if s == 0.0 {
                    return row.clone();
                }
                let z = (-lo / s).round_ties_even();
                row.iter()
                    .map(|v| s * (((v / s).round_ties_even() + z).clamp(0.0, qmax) - z))
                    .collect()
            })
            .collect()
    }

    /// `Σ_t λ_t ‖Q(W diag(e)) diag(e)⁻¹ x_t − W x_t‖²`, weight-only.
    pub fn weighted_error(w: &Matrix, x: &Matrix, e: &[f64], lambda: &[f64], bits: u32) -> f64 {
        let (m, d) = w.shape();
        let scaled: Vec<Vec<f64>> = (0..m)
            .map(|r| (0..d).map(|c| w[(r, c)] * e[c]).collect())
            .collect();
        let q = fake_quant_rows(&scaled, bits);
        let mut total = 0.0;
        for t in 0..x.cols() {
            let mut err = 0.0;
            for r in 0..m {
                let mut a = 0.0;
                let mut b = 0.0;
                for c in 0..d {
                    a += q[r][c] * (x[(c, t)] / e[c]);
                    b += w[(r, c)] * x[(c, t)];
                }
                err += (a - b) * (a - b);
            }
            total += lambda[t] * err;
        }
        total
    }

    /// Candidate `E(α)` computed element by element.
    pub fn candidate(w: &Matrix, x: &Matrix, alpha: f64) -> Vec<f64> {
        let d = w.cols();
        let mut e = vec![1.0; d];
        let mut live = vec![false; d];
        for c in 0..d {
            let mut xm = 0.0f64;
            for t in 0..x.cols() {
                xm = xm.max(x[(c, t)].abs());
            }
            let mut wm = 0.0f64;
            for r in 0..w.rows() {
                wm = wm.max(w[(r, c)].abs());
            }
            if xm > 0.0 && wm > 0.0 {
                e[c] = (xm.powf(alpha) / wm.powf(1.0 - alpha)).max(1e-5);
                live[c] = true;
            }
        }
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for c in 0..d {
            if live[c] {
                lo = lo.min(e[c]);
                hi = hi.max(e[c]);
            }
        }
        let norm = if hi > 0.0 { (lo * hi).sqrt() } else { 1.0 };
        for c in 0..d {
            if live[c] {
                e[c] /= norm;
            }
        }
        e
    }

    /// Winning α (`None` for identity) by exhaustive evaluation.
    pub fn best_alpha(
        w: &Matrix,
        x: &Matrix,
        lambda: &[f64],
        bits: u32,
        grid: usize,
    ) -> Option<f64> {
        let mut best = None;
        let mut best_err = weighted_error(w, x, &vec![1.0; w.cols()], lambda, bits);
        for k in 0..grid {
            let alpha = k as f64 / (grid - 1) as f64;
            let err = weighted_error(w, x, &candidate(w, x, alpha), lambda, bits);
            if err < best_err {
                best = Some(alpha);
                best_err = err;
            }
        }
        best
    }

    fn gauss_jordan_inverse(a: &Matrix) -> Matrix {
        let n = a.rows();
        let mut aug: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let mut row: Vec<f64> = a.row(i).to_vec();
                row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
                row
            })
            .collect();
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
                .unwrap();
            aug.swap(col, piv);
            let p = aug[col][col];
            for v in aug[col].iter_mut() {
                *v /= p;
            }
            for r in 0..n {
                if r != col {
                    let f = aug[r][col];
                    for k in 0..2 * n {
                        aug[r][k] -= f * aug[col][k];
                    }
                }
            }
        }
        Matrix::from_fn(n, n, |i, j| aug[i][n + j])
    }

    /// Column-by-column optimal-brain-quantization reference with the
    /// inverse Hessian downdated after every column.
    pub fn obq_codes(w: &Matrix, h: &Matrix, q: &mut crate::quantizers::QuantizedTensor) {
        let (m, d) = w.shape();
        let mut hinv = gauss_jordan_inverse(h);
        let mut work = w.clone();
        for j in 0..d {
            let piv = hinv[(j, j)];
            for r in 0..m {
                let g = q.group_of(r, j);
                let code = q.encode(work[(r, j)], g);
                q.codes[r * d + j] = code;
                let err = work[(r, j)] - q.decode(code, g);
                for k in j + 1..d {
                    work[(r, k)] -= err * hinv[(j, k)] / piv;
                }
            }
            let row: Vec<f64> = (0..d).map(|k| hinv[(j, k)]).collect();
            for a in 0..d {
                for b in 0..d {
                    hinv[(a, b)] -= row[a] * row[b] / piv;
                }
            }
        }
    }

    /// `X Xᵀ / T` plus damping on the diagonal.
    pub fn plain_hessian(x: &Matrix, damping: f64) -> Matrix {
        let (d, t) = x.shape();
        let mut h = Matrix::zeros(d, d);
        for a in 0..d {
            for b in 0..d {
                let mut v = 0.0;
                for i in 0..t {
                    v += x[(a, i)] * x[(b, i)];
                }
                h[(a, b)] = v / t as f64;
            }
        }
        let mean = (0..d).map(|i| h[(i, i)]).sum::<f64>() / d as f64;
        for i in 0..d {
            h[(i, i)] += damping * mean;
        }
        h
    }
}

fn quantizer_checks(suite: &mut Suite, seed: u64) -> Result<()> {
    let mut rng = rng_for(seed, "verify/quantizer");
    let x = standard_normal(1, 200, &mut rng);
    let cfg = QuantConfig::symmetric(3, Granularity::PerTensor);
    let q = quantize(&x, &cfg)?;
    let (lo, hi) = cfg.code_range();
    let mismatches = (0..200)
        .filter(|&i| q.codes[i] != oracle::nearest_code(x[(0, i)], q.scales[0], lo, hi))
        .count();
    suite.check("quantizer.nearest_code", Some(seed), mismatches as f64, 0.0);

    let t = standard_normal(8, 40, &mut rng).scale(3.0);
    let mut excess = 0.0f64;
    for cfg in [
        QuantConfig::asymmetric_grouped(3, 16),
        QuantConfig::symmetric(4, Granularity::PerToken),
        QuantConfig::symmetric(3, Granularity::PerChannel),
    ] {
        let q = quantize(&t, &cfg)?;
        let back = dequantize(&q)?;
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                let s = q.scales[q.group_of(r, c)];
                excess = excess.max(((t[(r, c)] - back[(r, c)]).abs() - s / 2.0) / s);
            }
        }
    }
    suite.check("quantizer.half_interval", Some(seed), excess.max(0.0), 1e-9);
    Ok(())
}

fn attribution_checks(suite: &mut Suite, seed: u64) -> Result<()> {
    // gradient against finite differences
    let kind = if seed.is_multiple_of(2) {
        BlockKind::Mlp
    } else {
        BlockKind::Attention
    };
    let model = random_model(kind, 6, 6, derive(seed, 1))?;
    let x = standard_normal(6, 5, &mut rng_for(seed, "verify/gradient"));
    let wcfg = if seed.is_multiple_of(2) {
        QuantConfig::asymmetric_grouped(3, 128)
    } else {
        QuantConfig::symmetric(4, Granularity::PerChannel)
    };
    let objective = DistortionObjective::new(&model, &QuantizedExecution::weight_only(wcfg))?;
    let gc = gradient_check(&objective, &x, 1e-4, 1e-6)?;
    suite.check(
        "gradient.finite_difference",
        Some(seed),
        gc.relative_error,
        1e-5,
    );

    // positively homogeneous path: one midpoint step is exact
    let linear = random_model(BlockKind::Linear, 6, 4, derive(seed, 2))?;
    let x = standard_normal(6, 8, &mut rng_for(seed, "verify/linear"));
    let r = qig(
        &linear,
        &QuantizedExecution::weight_only(QuantConfig::asymmetric_grouped(3, 128)),
        &x,
        1,
    )?;
    suite.check(
        "completeness.linear_single_step",
        Some(seed),
        r.residual,
        1e-10,
    );

    let mlp = random_model(BlockKind::Mlp, 8, 8, derive(seed, 3))?;
    let x = standard_normal(8, 16, &mut rng_for(seed, "verify/mlp"));
    let exec = QuantizedExecution::weight_activation(
        QuantConfig::symmetric(4, Granularity::PerChannel),
        QuantConfig::symmetric(8, Granularity::PerToken),
    );
    let coarse = qig(&mlp, &exec, &x, 8)?;
    let fine = qig(&mlp, &exec, &x, 256)?;
    suite.check(
        "completeness.mlp_256_steps",
        Some(seed),
        fine.relative_residual(),
        1e-3,
    );
    suite.check(
        "completeness.refinement",
        Some(seed),
        (fine.residual - coarse.residual).max(0.0),
        0.0,
    );
    Ok(())
}

fn derive(seed: u64, k: u64) -> u64 {
    seed.wrapping_mul(1000).wrapping_add(k)
}

fn equalization_checks(suite: &mut Suite, seed: u64) -> Result<()> {
    let mut rng = rng_for(seed, "verify/cwe");
    let w = standard_normal(3, 4, &mut rng);
    let x = standard_normal(4, 3, &mut rng);
    let raw = standard_normal(1, 3, &mut rng).into_vec();
    let lambda = build_sensitivity(&raw, 1.5)?.lambda;
    let wcfg = QuantConfig::asymmetric_grouped(3, 128);

    let found = search_scales(&w, &x, &lambda, Some(&wcfg), None, DEFAULT_GRID_SIZE)?;
    suite.check(
        "cwe.not_worse_than_identity",
        Some(seed),
        (found.weighted_error - found.identity_error()).max(0.0),
        0.0,
    );
    let expected = oracle::best_alpha(&w, &x, &lambda, 3, DEFAULT_GRID_SIZE);
    suite.check(
        "cwe.grid_oracle",
        Some(seed),
        f64::from(u8::from(found.alpha != expected)),
        0.0,
    );
    let uniform = search_scales(
        &w,
        &x,
        &uniform_lambda(3),
        Some(&wcfg),
        None,
        DEFAULT_GRID_SIZE,
    )?;
    let unweighted = search_scales_unweighted(&w, &x, Some(&wcfg), None, DEFAULT_GRID_SIZE)?;
    suite.check(
        "cwe.uniform_matches_unweighted",
        Some(seed),
        f64::from(u8::from(uniform.alpha != unweighted.alpha)),
        0.0,
    );
    Ok(())
}

fn gptq_checks(suite: &mut Suite, seed: u64) -> Result<()> {
    let mut rng = rng_for(seed, "verify/gptq");
    let (m, d, t) = (6, 8, 24);
    let w = standard_normal(m, d, &mut rng);
    let x = standard_normal(d, t, &mut rng);
    let wcfg = QuantConfig::asymmetric_grouped(3, 128);

    let h = weighted_hessian(&x, &uniform_lambda(t), DEFAULT_DAMPING)?;
    let codes = gptq_codes(&w, &h.matrix, &wcfg)?;
    let mut reference = quantize(&w, &wcfg)?;
    oracle::obq_codes(
        &w,
        &oracle::plain_hessian(&x, DEFAULT_DAMPING),
        &mut reference,
    );
    let mismatches = codes
        .codes
        .iter()
        .zip(&reference.codes)
        .filter(|(a, b)| a != b)
        .count();
    suite.check("gptq.uniform_reference", Some(seed), mismatches as f64, 0.0);

    let column = standard_normal(m, 1, &mut rng);
    let xc = standard_normal(1, t, &mut rng);
    let hc = weighted_hessian(&xc, &uniform_lambda(t), DEFAULT_DAMPING)?;
    let single = gptq_codes(&column, &hc.matrix, &wcfg)?;
    let mismatches = single
        .codes
        .iter()
        .zip(&rtn_quantize(&column, &wcfg)?.codes)
        .filter(|(a, b)| a != b)
        .count();
    suite.check(
        "gptq.single_column_is_rtn",
        Some(seed),
        mismatches as f64,
        0.0,
    );

    let focus = (seed % t as u64) as usize;
    let mut one_hot = vec![0.0; t];
    one_hot[focus] = 1.0;
    let h1 = weighted_hessian(&x, &one_hot, DEFAULT_DAMPING)?;
    let (_, report) = gptq_quantize(&w, &h1, &x, &wcfg)?;
    suite.check(
        "gptq.one_hot_focus",
        Some(seed),
        (report.per_token_errors[focus] - report.rtn_per_token_errors[focus]).max(0.0),
        1e-12 * report.rtn_per_token_errors[focus],
    );

    let raw = standard_normal(1, t, &mut rng).into_vec();
    let lambda = build_sensitivity(&raw, 1.5)?.lambda;
    let hw = weighted_hessian(&x, &lambda, DEFAULT_DAMPING)?;
    let (q, report) = gptq_quantize(&w, &hw, &x, &wcfg)?;
    let recomputed: f64 = per_token_reconstruction_errors(&w, &dequantize(&q)?, &x)?
        .iter()
        .zip(&lambda)
        .map(|(e, l)| e * l)
        .sum();
    suite.check(
        "gptq.report_consistent",
        Some(seed),
        (recomputed - report.weighted_error).abs(),
        1e-12 * report.weighted_error.max(1.0),
    );
    suite.observe(
        "gptq.weighted_error_over_rtn",
        seed,
        report.weighted_error / report.rtn_weighted_error,
    );
    Ok(())
}

fn weighting_checks(suite: &mut Suite, seed: u64) -> Result<()> {
    let worked = build_sensitivity(&[1.0, 2.0, 3.0, 4.0, 100.0], 1.5)?;
    let expected = [1.0, 2.0, 3.0, 4.0, 7.0];
    let mut diff = 0.0f64;
    for i in 0..5 {
        diff = diff.max((worked.clipped[i] - expected[i]).abs());
        diff = diff.max((worked.lambda[i] - expected[i] / 17.0).abs());
    }
    suite.check("weighting.worked_example", Some(seed), diff, 0.0);

    let mut rng = rng_for(seed, "verify/weighting");
    let mut worst = 0.0f64;
    for n in 1..=50 {
        let raw = standard_normal(1, n, &mut rng).into_vec();
        let s = build_sensitivity(&raw, 1.5)?;
        worst = worst.max((s.lambda.iter().sum::<f64>() - 1.0).abs());
    }
    suite.check("weighting.sums_to_one", Some(seed), worst, 1e-12);
    let degenerate = build_sensitivity(&[0.0; 7], 1.5)?;
    let off = degenerate
        .lambda
        .iter()
        .map(|l| (l - 1.0 / 7.0).abs())
        .fold(0.0, f64::max);
    suite.check("weighting.degenerate_uniform", Some(seed), off, 0.0);
    Ok(())
}

fn reserialized_differs<T: Serialize>(path: &Path, value: &T) -> Result<f64> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(f64::from(u8::from(fs::read_to_string(path)? != text)))
}

fn run_dir_checks(suite: &mut Suite, dir: &Path) -> Result<()> {
    let model_path = dir.join(MODEL_FILE);
    let calib_path = dir.join(CALIB_FILE);
    let model = read_model(&model_path)?;
    suite.check(
        "files.model_round_trip",
        None,
        reserialized_differs(&model_path, &ModelFile::from_model(&model)?)?,
        0.0,
    );
    let batches = read_calibration(&calib_path)?;
    suite.check(
        "files.calibration_round_trip",
        None,
        reserialized_differs(&calib_path, &calibration_to_file(&batches)?)?,
        0.0,
    );
    let attribution_path = dir.join(ATTRIBUTION_JSON);
    if attribution_path.exists() {
        let summary: AttributionSummary = read_json(&attribution_path)?;
        let total: f64 = summary.sensitivity.raw.iter().sum();
        let n = summary.sequences.len() as f64;
        let change: f64 = summary
            .sequences
            .iter()
            .map(|s| s.value_at_input - s.value_at_baseline)
            .sum::<f64>()
            / n;
        // the mean of per-sequence residuals bounds the residual of the mean
        let bound = summary.sequences.iter().map(|s| s.residual).sum::<f64>() / n;
        suite.check(
            "files.attribution_residual",
            None,
            ((total - change).abs() - bound).max(0.0),
            1e-12 * change.abs().max(1e-300),
        );
        // recompute one sequence from scratch
        let exec = QuantizedExecution {
            weight_cfg: Some(summary.weight_config),
            act_cfg: summary.act_config,
            equalization: None,
        };
        let fresh = qig(&model, &exec, &batches[0], summary.steps)?;
        suite.check(
            "files.attribution_reproducible",
            None,
            (fresh.residual - summary.sequences[0].residual).abs(),
            0.0,
        );
    }
    let quantized_path = dir.join(QUANTIZED_FILE);
    if quantized_path.exists() {
        let file: QuantizedModelFile = read_json(&quantized_path)?;
        let block = file.to_block()?;
        suite.check(
            "files.quantized_round_trip",
            None,
            reserialized_differs(&quantized_path, &QuantizedModelFile::from_block(&block)?)?,
            0.0,
        );
    }
    let report_path = dir.join(QUANTIZE_REPORT);
    if report_path.exists() {
        let report: QuantizeReport = read_json(&report_path)?;
        let mut excess = 0.0f64;
        let mut any = false;
        for layer in &report.layers {
            if let LayerDetail::Cwe { identity_error, .. } = layer.detail {
                any = true;
                excess = excess.max(layer.weighted_error - identity_error);
            }
        }
        if any {
            suite.check(
                "files.cwe_not_worse_than_identity",
                None,
                excess.max(0.0),
                0.0,
            );
        }
    }
    Ok(())
}

/// Runs every check for seeds `base..base + 5` and writes `verify.json`
/// (deterministic) and `verify_timing.json` into `args.out`.
pub fn cmd_verify(args: &VerifyArgs) -> Result<(VerifyReport, VerifyTiming)> {
    if !(args.tolerance_scale.is_finite() && args.tolerance_scale >= 0.0) {
        return Err(Error::InvalidArgument(
            "tolerance scale must be >= 0".into(),
        ));
    }
    let start = Instant::now();
    let mut suite = Suite {
        scale: args.tolerance_scale,
        checks: Vec::new(),
        observations: Vec::new(),
    };
    for seed in args.base_seed..args.base_seed + SEEDS_PER_RUN {
        quantizer_checks(&mut suite, seed)?;
        attribution_checks(&mut suite, seed)?;
        equalization_checks(&mut suite, seed)?;
        gptq_checks(&mut suite, seed)?;
        weighting_checks(&mut suite, seed)?;
    }
    if let Some(dir) = &args.run_dir {
        run_dir_checks(&mut suite, dir)?;
    }
    let passed = suite.checks.iter().all(|c| c.passed);
    let report = VerifyReport {
        base_seed: args.base_seed,
        tolerance_scale: args.tolerance_scale,
        checks: suite.checks,
        observations: suite.observations,
        passed,
    };
    let elapsed = start.elapsed().as_secs_f64();
    let timing = VerifyTiming {
        elapsed_seconds: elapsed,
        runtime_bound_seconds: RUNTIME_BOUND_SECONDS,
        within_bound: elapsed <= RUNTIME_BOUND_SECONDS,
    };
    fs::create_dir_all(&args.out)?;
    super::format::write_json(&args.out.join("verify.json"), &report)?;
    super::format::write_json(&args.out.join("verify_timing.json"), &timing)?;
    Ok((report, timing))
}
