//! From raw attributions to token weights, with one injected outlier token.

#![allow(clippy::needless_range_loop)]

use qig_quant::attribution::{leave_one_out_sensitivity, qig};
use qig_quant::synth::{calibration, inject_outlier, random_model, Outlier};
use qig_quant::toyblock::QuantizedExecution;
use qig_quant::weighting::build_sensitivity;
use qig_quant::{BlockKind, Granularity, QuantConfig};

fn main() -> qig_quant::Result<()> {
    let model = random_model(BlockKind::Mlp, 8, 8, 3)?;
    let mut x = calibration(8, 12, 3);
    inject_outlier(
        &mut x,
        Outlier::Token {
            index: 5,
            scale: 50.0,
        },
    )?;
    let exec = QuantizedExecution::weight_activation(
        QuantConfig::symmetric(4, Granularity::PerChannel),
        QuantConfig::symmetric(8, Granularity::PerToken),
    );
    let scores = qig(&model, &exec, &x, 32)?.per_token_scores;
    let loo = leave_one_out_sensitivity(&model, &exec, &x)?;
    let s = build_sensitivity(&scores, 1.5)?;
    println!("token  |qig|        leave-one-out  clipped      lambda");
    for t in 0..x.cols() {
        println!(
            "{t:>5}  {:<11.4e}  {:<13.4e}  {:<11.4e}  {:.4}",
            s.magnitude[t], loo[t], s.clipped[t], s.lambda[t]
        );
    }
    Ok(())
}
