//! GPTQ with a token-weighted Hessian, against round-to-nearest.

use qig_quant::gptq::{gptq_quantize, weighted_hessian, DEFAULT_DAMPING};
use qig_quant::synth::{rng_for, standard_normal};
use qig_quant::weighting::{build_sensitivity, uniform_lambda};
use qig_quant::QuantConfig;

fn main() -> qig_quant::Result<()> {
    let w = standard_normal(12, 16, &mut rng_for(11, "weight"));
    let x = standard_normal(16, 48, &mut rng_for(11, "activations"));
    let raw = standard_normal(1, 48, &mut rng_for(11, "scores")).into_vec();
    let cfg = QuantConfig::asymmetric_grouped(3, 128);
    for (label, lambda) in [
        ("uniform", uniform_lambda(48)),
        ("weighted", build_sensitivity(&raw, 1.5)?.lambda),
    ] {
        let h = weighted_hessian(&x, &lambda, DEFAULT_DAMPING)?;
        let (_, report) = gptq_quantize(&w, &h, &x, &cfg)?;
        println!(
            "{label:<9} gptq {:.4e}  rtn {:.4e}  ratio {:.3}",
            report.weighted_error,
            report.rtn_weighted_error,
            report.weighted_error / report.rtn_weighted_error
        );
    }
    Ok(())
}
