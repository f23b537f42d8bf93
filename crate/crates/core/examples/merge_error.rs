//! Merge error of folding a random transform into a linear layer under the
//! three precision schemes, at a size that runs in a few seconds.

use affinequant::fusion::{merge_error_csv, merge_error_experiment, MergeErrorConfig};
use affinequant::PrecisionScheme;

fn main() -> affinequant::Result<()> {
    let rows = PrecisionScheme::ALL
        .iter()
        .map(|&s| merge_error_experiment(&MergeErrorConfig::new(256, 128, 10, s, 7)))
        .collect::<affinequant::Result<Vec<_>>>()?;
    print!("{}", merge_error_csv(&rows));
    Ok(())
}
