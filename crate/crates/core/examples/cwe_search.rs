//! Token-weighted channel-wise equalization on one layer with an outlier
//! channel, compared with the identity scales.

use qig_quant::equalization::{search_scales, search_scales_unweighted, DEFAULT_GRID_SIZE};
use qig_quant::synth::{calibration, inject_outlier, random_model, Outlier};
use qig_quant::toyblock::BlockModel;
use qig_quant::weighting::build_sensitivity;
use qig_quant::{BlockKind, Granularity, QuantConfig};

fn main() -> qig_quant::Result<()> {
    let BlockModel::Linear { w } = random_model(BlockKind::Linear, 8, 6, 2)? else {
        unreachable!()
    };
    let mut x = calibration(8, 24, 2);
    inject_outlier(
        &mut x,
        Outlier::Channel {
            index: 1,
            scale: 20.0,
        },
    )?;
    let wcfg = QuantConfig::symmetric(4, Granularity::PerChannel);
    let acfg = QuantConfig::symmetric(4, Granularity::PerToken);
    // stand-in importances: later tokens matter more
    let raw: Vec<f64> = (0..24).map(|t| 1.0 + t as f64 / 8.0).collect();
    let lambda = build_sensitivity(&raw, 1.5)?.lambda;

    let weighted = search_scales(&w, &x, &lambda, Some(&wcfg), Some(&acfg), DEFAULT_GRID_SIZE)?;
    let plain = search_scales_unweighted(&w, &x, Some(&wcfg), Some(&acfg), DEFAULT_GRID_SIZE)?;
    println!("alpha     weighted error");
    for t in &weighted.trace {
        let label = t
            .alpha
            .map_or("identity".to_string(), |a| format!("{a:.2}"));
        println!("{label:<10}{:.5e}", t.weighted_error);
    }
    println!(
        "weighted winner {:?}, unweighted winner {:?}",
        weighted.alpha, plain.alpha
    );
    println!("scales {:.3?}", weighted.scales);
    Ok(())
}
