//! Completeness of quantization-aware integrated gradients: the token
//! scores add up to the distortion change along the path.

use qig_quant::attribution::qig;
use qig_quant::synth::{calibration, random_model};
use qig_quant::toyblock::QuantizedExecution;
use qig_quant::{BlockKind, Granularity, QuantConfig};

fn main() -> qig_quant::Result<()> {
    let model = random_model(BlockKind::Mlp, 8, 8, 0)?;
    let x = calibration(8, 16, 0);
    let exec = QuantizedExecution::weight_activation(
        QuantConfig::symmetric(4, Granularity::PerChannel),
        QuantConfig::symmetric(8, Granularity::PerToken),
    );
    println!("steps  sum(scores)      L(x) - L(x_q)    relative residual");
    for steps in [1, 4, 16, 64, 256] {
        let r = qig(&model, &exec, &x, steps)?;
        let total: f64 = r.per_token_scores.iter().sum();
        println!(
            "{steps:>5}  {total:<15.9}  {:<15.9}  {:.3e}",
            r.value_at_input - r.value_at_baseline,
            r.relative_residual()
        );
    }
    // weight-only linear blocks are exact after one step
    let linear = random_model(BlockKind::Linear, 8, 4, 0)?;
    let r = qig(
        &linear,
        &QuantizedExecution::weight_only(QuantConfig::asymmetric_grouped(3, 128)),
        &x,
        1,
    )?;
    println!("linear, one step: residual {:.1e}", r.residual);
    Ok(())
}
