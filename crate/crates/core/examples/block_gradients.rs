//! Analytic input gradient of the quantization distortion against finite
//! differences, for each block kind.

use qig_quant::attribution::{gradient_check, DistortionObjective};
use qig_quant::synth::{calibration, random_model};
use qig_quant::toyblock::QuantizedExecution;
use qig_quant::{BlockKind, QuantConfig};

fn main() -> qig_quant::Result<()> {
    let exec = QuantizedExecution::weight_only(QuantConfig::asymmetric_grouped(3, 128));
    for kind in [BlockKind::Linear, BlockKind::Mlp, BlockKind::Attention] {
        let model = random_model(kind, 6, 5, 1)?;
        let x = calibration(6, 5, 1);
        let objective = DistortionObjective::new(&model, &exec)?;
        let check = gradient_check(&objective, &x, 1e-4, 1e-6)?;
        println!(
            "{:<9} relative error {:.2e}  skipped {} of {} coordinates",
            kind.to_string(),
            check.relative_error,
            check.excluded.len(),
            x.rows() * x.cols()
        );
    }
    Ok(())
}
