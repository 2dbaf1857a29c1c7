//! The file-based pipeline in one process: generate, attribute, quantize
//! with each method, verify.

use qig_quant::cli::{
    cmd_attribute, cmd_gen_model, cmd_quantize, cmd_verify, GenModelArgs, Method, RunConfig,
    VerifyArgs,
};
use qig_quant::synth::Outlier;
use qig_quant::BlockKind;

fn main() -> qig_quant::Result<()> {
    let dir = std::env::temp_dir().join("qig-pipeline-example");
    let (model, calib) = cmd_gen_model(&GenModelArgs {
        kind: BlockKind::Mlp,
        d: 8,
        m: 8,
        tokens: 16,
        batches: 1,
        seed: 0,
        outliers: vec![Outlier::Token {
            index: 3,
            scale: 50.0,
        }],
        out: dir.clone(),
    })?;
    let mut cfg = RunConfig::new(model, calib, dir.clone());
    let summary = cmd_attribute(&cfg)?;
    println!("attribution residual {:.2e}", summary.max_residual);
    for method in [Method::Rtn, Method::Gptq, Method::Cwe] {
        cfg.method = method;
        let report = cmd_quantize(&cfg)?;
        println!(
            "{method:<5} block weighted error {:.4e}",
            report.block.weighted_error
        );
    }
    let (report, timing) = cmd_verify(&VerifyArgs {
        base_seed: 0,
        tolerance_scale: 1.0,
        run_dir: Some(dir.clone()),
        out: dir.clone(),
    })?;
    let failed = report.checks.iter().filter(|c| !c.passed).count();
    println!(
        "verify: {} checks, {failed} failed, {:.2}s; outputs in {}",
        report.checks.len(),
        timing.elapsed_seconds,
        dir.display()
    );
    Ok(())
}
