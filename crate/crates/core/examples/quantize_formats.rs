//! Symmetric and asymmetric grouped quantization on a small tensor.

use qig_quant::quantizers::{dequantize, quantize};
use qig_quant::synth::{rng_for, standard_normal};
use qig_quant::{Granularity, QuantConfig};

fn main() -> qig_quant::Result<()> {
    let w = standard_normal(4, 10, &mut rng_for(7, "example"));
    let formats = [
        (
            "sym per-tensor b4",
            QuantConfig::symmetric(4, Granularity::PerTensor),
        ),
        (
            "sym per-channel b4",
            QuantConfig::symmetric(4, Granularity::PerChannel),
        ),
        (
            "sym per-token b8",
            QuantConfig::symmetric(8, Granularity::PerToken),
        ),
        ("asym group-4 b3", QuantConfig::asymmetric_grouped(3, 4)),
    ];
    for (label, cfg) in formats {
        let q = quantize(&w, &cfg)?;
        let err = dequantize(&q)?.sub(&w)?;
        println!(
            "{label:<20} groups {:>2}  max |err| {:.4}  frobenius {:.4}",
            q.scales.len(),
            err.max_abs(),
            err.frobenius_norm()
        );
    }
    let q = quantize(&w, &QuantConfig::asymmetric_grouped(3, 4))?;
    println!("row 0 codes {:?}", &q.codes[..10]);
    println!("row 0 zero points {:?}", &q.zero_points[..3]);
    Ok(())
}
