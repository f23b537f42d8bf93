//! Final block loss and downstream CE gap across stability factors, with
//! their correlation.

use affinequant::block::{BlockParams, TransformPlacementConfig};
use affinequant::optimizer::{alpha_sweep, synthetic_batches, OptimizerConfig};

fn main() -> affinequant::Result<()> {
    let params = BlockParams::random(32, 4, 42)?;
    let calib = synthetic_batches(0, 4, 64, 32);
    let heldout = synthetic_batches(1, 2, 64, 32);
    let placement = TransformPlacementConfig::full(TransformPlacementConfig::default().weight_quant);
    let cfg = OptimizerConfig {
        epochs: 10,
        ..OptimizerConfig::default()
    };
    let res = alpha_sweep(&params, &calib, &heldout, &placement, &cfg, &[0.0, 1e-4, 1e-2, 1e-1, 1.0])?;
    print!("{}", res.table.to_csv());
    match res.table.pearson {
        Some(r) => println!("pearson(loss, ce gap) = {r:.3}"),
        None => println!("too few rows for a correlation"),
    }
    Ok(())
}
