use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;

use log::{debug, info};
use serde::{Deserialize, Serialize};

use super::format::{
    calibration_to_file, read_calibration, read_model, write_json, ModelFile, QuantizedModelFile,
};
use super::{Method, RunConfig};
use crate::attribution::{distortion_error, qig_batched, AttributionResult, BaselineKind};
use crate::equalization::{
    collect_layer_inputs_batched, equalize_layer_inputs, per_token_errors, TraceEntry,
};
use crate::error::{Error, Result};
use crate::gptq::{gptq_quantize, weighted_hessian, DEFAULT_DAMPING};
use crate::quantizers::{quantize, QuantConfig};
use crate::synth::{inject_outlier, random_model, rng_for, standard_normal, Outlier};
use crate::tensor::Matrix;
use crate::toyblock::{block_forward, BlockKind, BlockModel, QuantizedBlock};
use crate::weighting::{build_sensitivity, SensitivityVector};

#[derive(Debug, Clone, PartialEq)]
pub struct GenModelArgs {
    pub kind: BlockKind,
    pub d: usize,
    pub m: usize,
    pub tokens: usize,
    pub batches: usize,
    pub seed: u64,
    pub outliers: Vec<Outlier>,
    pub out: PathBuf,
}

pub const MODEL_FILE: &str = "model.json";
pub const CALIB_FILE: &str = "calib.json";
pub const ATTRIBUTION_CSV: &str = "attribution.csv";
pub const ATTRIBUTION_JSON: &str = "attribution.json";
pub const QUANTIZED_FILE: &str = "quantized_model.json";
pub const QUANTIZE_REPORT: &str = "quantize_report.json";

/// Writes `model.json` and `calib.json` into `args.out`. Outliers are
/// applied to every calibration sequence.
pub fn cmd_gen_model(args: &GenModelArgs) -> Result<(PathBuf, PathBuf)> {
    if args.tokens == 0 || args.batches == 0 {
        return Err(Error::InvalidArgument(
            "tokens and batches must be positive".into(),
        ));
    }
    let model = random_model(args.kind, args.d, args.m, args.seed)?;
    let mut rng = rng_for(args.seed, "calibration");
    let mut batches = Vec::with_capacity(args.batches);
    for _ in 0..args.batches {
        let mut x = standard_normal(args.d, args.tokens, &mut rng);
        for o in &args.outliers {
            inject_outlier(&mut x, *o)?;
        }
        batches.push(x);
    }
    fs::create_dir_all(&args.out)?;
    let model_path = args.out.join(MODEL_FILE);
    let calib_path = args.out.join(CALIB_FILE);
    write_json(&model_path, &ModelFile::from_model(&model)?)?;
    write_json(&calib_path, &calibration_to_file(&batches)?)?;
    info!(
        "wrote {} and {}",
        model_path.display(),
        calib_path.display()
    );
    Ok((model_path, calib_path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceAttribution {
    pub residual: f64,
    pub relative_residual: f64,
    pub value_at_input: f64,
    pub value_at_baseline: f64,
    pub baseline: BaselineKind,
}

impl From<&AttributionResult> for SequenceAttribution {
    fn from(r: &AttributionResult) -> Self {
        Self {
            residual: r.residual,
            relative_residual: r.relative_residual(),
            value_at_input: r.value_at_input,
            value_at_baseline: r.value_at_baseline,
            baseline: r.baseline_kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub steps: usize,
    pub iqr_k: f64,
    pub seed: u64,
    pub weight_config: QuantConfig,
    pub act_config: Option<QuantConfig>,
    pub tokens: usize,
    pub sequences: Vec<SequenceAttribution>,
    pub max_residual: f64,
    pub max_relative_residual: f64,
    pub sensitivity: SensitivityVector,
}

fn load_inputs(cfg: &RunConfig) -> Result<(BlockModel, Vec<Matrix>)> {
    cfg.validate()?;
    let model = read_model(&cfg.model)?;
    let batches = read_calibration(&cfg.calib)?;
    for x in &batches {
        model.check_input(x)?;
    }
    Ok((model, batches))
}

fn attribute_loaded(
    cfg: &RunConfig,
    model: &BlockModel,
    batches: &[Matrix],
) -> Result<AttributionSummary> {
    let exec = cfg.execution();
    let (scores, results) = qig_batched(model, &exec, batches, cfg.ig_steps)?;
    let sensitivity = build_sensitivity(&scores, cfg.iqr_k)?;
    let sequences: Vec<SequenceAttribution> =
        results.iter().map(SequenceAttribution::from).collect();
    let max_residual = sequences.iter().map(|s| s.residual).fold(0.0, f64::max);
    let max_relative_residual = sequences
        .iter()
        .map(|s| s.relative_residual)
        .fold(0.0, f64::max);
    debug!("attribution residual {max_residual:e} (relative {max_relative_residual:e})");
    Ok(AttributionSummary {
        steps: cfg.ig_steps,
        iqr_k: cfg.iqr_k,
        seed: cfg.seed,
        weight_config: cfg.weight_config(),
        act_config: cfg.act_config(),
        tokens: scores.len(),
        sequences,
        max_residual,
        max_relative_residual,
        sensitivity,
    })
}

pub fn attribution_csv(s: &SensitivityVector) -> String {
    let mut out = String::from("token_index,raw_qig,abs_qig,clipped,lambda\n");
    for i in 0..s.raw.len() {
        let _ = writeln!(
            out,
            "{i},{},{},{},{}",
            s.raw[i], s.magnitude[i], s.clipped[i], s.lambda[i]
        );
    }
    out
}

/// Token sensitivities: writes `attribution.csv` and `attribution.json`.
pub fn cmd_attribute(cfg: &RunConfig) -> Result<AttributionSummary> {
    let (model, batches) = load_inputs(cfg)?;
    let summary = attribute_loaded(cfg, &model, &batches)?;
    fs::create_dir_all(&cfg.out)?;
    fs::write(
        cfg.out.join(ATTRIBUTION_CSV),
        attribution_csv(&summary.sensitivity),
    )?;
    write_json(&cfg.out.join(ATTRIBUTION_JSON), &summary)?;
    info!(
        "attributed {} tokens over {} sequence(s), max residual {:e}",
        summary.tokens,
        batches.len(),
        summary.max_residual
    );
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum LayerDetail {
    Cwe {
        alpha: Option<f64>,
        identity_error: f64,
        trace: Vec<TraceEntry>,
    },
    Gptq {
        rtn_weighted_error: f64,
        rtn_unweighted_error: f64,
        damping: f64,
    },
    Rtn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    /// `Σ_t λ_t ‖W x_t − Ŵ x̂_t‖²` over the layer's calibration inputs.
    pub weighted_error: f64,
    /// Mean over tokens of the same squared error.
    pub unweighted_error: f64,
    pub detail: LayerDetail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockErrors {
    /// `Σ_t λ_t e_t` of the block's per-token mean absolute output gap.
    pub weighted_error: f64,
    pub unweighted_error: f64,
    pub per_token_errors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeReport {
    pub method: Method,
    pub seed: u64,
    pub weight_config: QuantConfig,
    pub act_config: Option<QuantConfig>,
    pub ig_steps: usize,
    pub iqr_k: f64,
    pub lambda: Vec<f64>,
    pub block: BlockErrors,
    pub layers: Vec<LayerReport>,
}

fn weighted_and_mean(errors: &[f64], weights: &[f64]) -> (f64, f64) {
    let weighted = errors.iter().zip(weights).map(|(e, l)| l * e).sum();
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    (weighted, mean)
}

/// `λ` spread over all calibration tokens, each sequence weighted `1/B`.
fn tile_lambda(lambda: &[f64], sequences: usize) -> Vec<f64> {
    let share = 1.0 / sequences as f64;
    (0..sequences)
        .flat_map(|_| lambda.iter().map(move |l| l * share))
        .collect()
}

fn block_errors(
    model: &BlockModel,
    block: &QuantizedBlock,
    batches: &[Matrix],
    tiled: &[f64],
) -> Result<BlockErrors> {
    let mut per_token = Vec::with_capacity(tiled.len());
    for x in batches {
        let d = distortion_error(&block_forward(model, x)?, &block.forward(x)?)?;
        per_token.extend(d.per_token);
    }
    let (weighted_error, unweighted_error) = weighted_and_mean(&per_token, tiled);
    Ok(BlockErrors {
        weighted_error,
        unweighted_error,
        per_token_errors: per_token,
    })
}

fn trace_csv(trace: &[TraceEntry]) -> String {
    let mut out = String::from("alpha,weighted_error\n");
    for t in trace {
        let alpha = t
            .alpha
            .map_or_else(|| "identity".to_string(), |a| a.to_string());
        let _ = writeln!(out, "{alpha},{}", t.weighted_error);
    }
    out
}

pub fn trace_file_name(layer: &str) -> String {
    format!("cwe_trace_{layer}.csv")
}

/// Quantizes the model with `cfg.method`, using QIG token weights computed
/// on the calibration set. Writes the quantized block and a JSON report.
pub fn cmd_quantize(cfg: &RunConfig) -> Result<QuantizeReport> {
    let (model, batches) = load_inputs(cfg)?;
    let sensitivity = attribute_loaded(cfg, &model, &batches)?.sensitivity;
    let lambda = sensitivity.lambda;
    let tiled = tile_lambda(&lambda, batches.len());
    let inputs = collect_layer_inputs_batched(&model, &batches)?;
    let wcfg = cfg.weight_config();
    let acfg = cfg.act_config();
    let names = model.kind().layer_names();
    let layers = model.linear_layers();
    fs::create_dir_all(&cfg.out)?;

    let (block, layer_reports) = match cfg.method {
        Method::Cwe => {
            let (block, results) =
                equalize_layer_inputs(&model, &inputs, &tiled, &wcfg, acfg.as_ref())?;
            let mut reports = Vec::new();
            for (i, r) in results.iter().enumerate() {
                let errs =
                    per_token_errors(layers[i], &inputs[i], &r.scales, Some(&wcfg), acfg.as_ref())?;
                let (weighted_error, unweighted_error) = weighted_and_mean(&errs, &tiled);
                fs::write(cfg.out.join(trace_file_name(names[i])), trace_csv(&r.trace))?;
                reports.push(LayerReport {
                    name: names[i].to_string(),
                    weighted_error,
                    unweighted_error,
                    detail: LayerDetail::Cwe {
                        alpha: r.alpha,
                        identity_error: r.identity_error(),
                        trace: r.trace.clone(),
                    },
                });
            }
            (block, reports)
        }
        Method::Gptq => {
            let mut weights = Vec::new();
            let mut reports = Vec::new();
            for (i, w) in layers.iter().enumerate() {
                let h = weighted_hessian(&inputs[i], &tiled, DEFAULT_DAMPING)?;
                let (q, rep) = gptq_quantize(w, &h, &inputs[i], &wcfg)?;
                let (weighted_error, unweighted_error) =
                    weighted_and_mean(&rep.per_token_errors, &tiled);
                let (rtn_weighted_error, rtn_unweighted_error) =
                    weighted_and_mean(&rep.rtn_per_token_errors, &tiled);
                weights.push(q);
                reports.push(LayerReport {
                    name: names[i].to_string(),
                    weighted_error,
                    unweighted_error,
                    detail: LayerDetail::Gptq {
                        rtn_weighted_error,
                        rtn_unweighted_error,
                        damping: rep.damping,
                    },
                });
            }
            (
                QuantizedBlock::from_quantized_weights(model.kind(), weights, None)?,
                reports,
            )
        }
        Method::Rtn => {
            let mut weights = Vec::new();
            let mut reports = Vec::new();
            for (i, w) in layers.iter().enumerate() {
                let ones = vec![1.0; w.cols()];
                let errs = per_token_errors(w, &inputs[i], &ones, Some(&wcfg), acfg.as_ref())?;
                let (weighted_error, unweighted_error) = weighted_and_mean(&errs, &tiled);
                weights.push(quantize(w, &wcfg)?);
                reports.push(LayerReport {
                    name: names[i].to_string(),
                    weighted_error,
                    unweighted_error,
                    detail: LayerDetail::Rtn,
                });
            }
            (
                QuantizedBlock::from_quantized_weights(model.kind(), weights, acfg)?,
                reports,
            )
        }
    };

    let report = QuantizeReport {
        method: cfg.method,
        seed: cfg.seed,
        weight_config: wcfg,
        act_config: acfg,
        ig_steps: cfg.ig_steps,
        iqr_k: cfg.iqr_k,
        block: block_errors(&model, &block, &batches, &tiled)?,
        lambda,
        layers: layer_reports,
    };
    write_json(
        &cfg.out.join(QUANTIZED_FILE),
        &QuantizedModelFile::from_block(&block)?,
    )?;
    write_json(&cfg.out.join(QUANTIZE_REPORT), &report)?;
    info!(
        "{} quantization: block weighted error {:e}",
        cfg.method, report.block.weighted_error
    );
    Ok(report)
}
