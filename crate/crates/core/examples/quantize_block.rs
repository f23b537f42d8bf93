//! Calibrates transforms for the seed-42 toy block at 4 bits and compares
//! learned affine transforms with diagonal-only ones.

use affinequant::block::{BlockParams, TransformPlacementConfig};
use affinequant::optimizer::{optimize_block, synthetic_batches, OptimizerConfig};

fn main() -> affinequant::Result<()> {
    env_logger::init();
    let params = BlockParams::random(64, 4, 42)?;
    let calib = synthetic_batches(0, 8, 128, 64);
    let placement = TransformPlacementConfig::default();

    for alpha in [1.0, 0.0] {
        let cfg = OptimizerConfig {
            alpha: Some(alpha),
            ..OptimizerConfig::default()
        };
        let r = optimize_block(0, &params, &calib, &placement, &cfg)?;
        let rep = &r.report;
        println!(
            "alpha {alpha}: {} loss {:.1} -> {:.1}, dominant throughout: {}, {:.1}s",
            rep.label,
            rep.initial_loss,
            rep.final_loss,
            rep.all_sdd(),
            rep.wall_time_secs
        );
    }
    Ok(())
}
