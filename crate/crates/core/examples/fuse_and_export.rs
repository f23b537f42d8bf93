//! Learns transforms, folds them into the block's weights, checks the fused
//! block against the transformed one and round-trips it through a container.

use affinequant::block::{BlockParams, TransformPlacementConfig};
use affinequant::fusion::{fuse_block, verify_fusion};
use affinequant::io::{load_fused, save_fused};
use affinequant::optimizer::{optimize_block, synthetic_batches, OptimizerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let params = BlockParams::random(32, 4, 42)?;
    let calib = synthetic_batches(1, 4, 64, 32);
    let cfg = OptimizerConfig {
        epochs: 5,
        ..OptimizerConfig::default()
    };
    let r = optimize_block(0, &params, &calib, &TransformPlacementConfig::default(), &cfg)?;
    let fused = fuse_block(&params, &r.transforms)?;
    println!("fused vs transformed: {:.2e}", verify_fusion(&params, &r.transforms, &fused, &calib)?);
    println!("parameters: {} before, {} after", params.parameter_count(), fused.parameter_count());
    println!("dense after folding: {:?}", fused.dense_linears());

    let dir = std::env::temp_dir().join("affinequant-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("fused.afqt");
    save_fused(&path, std::slice::from_ref(&fused))?;
    let back = load_fused(&path)?;
    println!("{} bytes, round trip exact: {}", std::fs::metadata(&path)?.len(), back[0] == fused);
    Ok(())
}
