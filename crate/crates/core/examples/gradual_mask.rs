//! How the band of trainable off-diagonal entries widens over the epochs.

use affinequant::affine::{gradual_mask, mask_for_kind, MaskSchedule, TransformKind};

fn main() -> affinequant::Result<()> {
    let s = MaskSchedule {
        target_epochs: 4,
        stability_factor: 0.5,
        hidden_size: 8,
    };
    for epoch in 1..=s.target_epochs {
        println!("epoch {epoch}:");
        let m = gradual_mask(epoch, &s)?;
        for r in 0..m.rows() {
            let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:4}")).collect();
            println!("  {}", row.join(" "));
        }
    }

    // two heads of four channels: the band grows inside each head only
    let m = mask_for_kind(TransformKind::PerHead { head_dim: 4 }, 8, 4, &s)?;
    println!("per-head, last epoch:");
    for r in 0..m.rows() {
        let row: Vec<String> = m.row(r).iter().map(|v| format!("{v:4}")).collect();
        println!("  {}", row.join(" "));
    }
    Ok(())
}
