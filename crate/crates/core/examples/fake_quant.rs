//! Step sizes, zero points and rounding error of uniform quantization, and
//! the integer codes an export stores.

use affinequant::quant::{compute_qparams, fake_quant, quantize_export, Granularity, QuantConfig};
use affinequant::Tensor;

fn main() -> affinequant::Result<()> {
    let x = Tensor::from_rows(&[[-1.0, 0.25, 1.0, 0.6], [0.1, -0.4, 2.0, 0.0]]);
    for bits in [2, 3, 4, 8] {
        let cfg = QuantConfig {
            bits,
            granularity: Granularity::PerTensor,
            symmetric: false,
            learnable_clip: false,
        };
        let qp = compute_qparams(&x, &cfg)?;
        let y = fake_quant(&x, &qp)?;
        let err = x.sub(&y)?.max_abs();
        println!("{bits} bits: delta {:.4} zp {} max error {err:.4}", qp.delta[0], qp.zero_point[0]);
    }

    // per output channel: one step size per column
    let qp = compute_qparams(&x, &QuantConfig::weight(4))?;
    let q = quantize_export(&x, &qp)?;
    println!("per-channel deltas {:?}", qp.delta);
    println!("codes {:?}", q.codes);
    assert_eq!(q.dequantize(), fake_quant(&x, &qp)?);
    Ok(())
}
