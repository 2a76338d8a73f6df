//! Two training environments whose spurious feature agrees with the label
//! 90% and 80% of the time, and a test set where it agrees only 10% of the
//! time. Compares pooled ERM with per-environment heads.
//!
//!     cargo run --release --example spurious_ood

use unshuffle::datagen::{gen_spurious, SpuriousSpec};
use unshuffle::eval::{compare, ExperimentData, Variant};
use unshuffle::{PartitionStrategy, TrainConfig};

fn main() -> unshuffle::Result<()> {
    let splits = gen_spurious(&SpuriousSpec::default(), 0)?;
    let data = ExperimentData {
        sources: splits.train,
        val: splits.val,
        test: splits.test,
    };
    let base = TrainConfig::default();
    let variants = [
        Variant::erm(&base),
        Variant::new("heads, relative variance", base.clone(), PartitionStrategy::DatasetId),
        Variant::new(
            "heads, no penalty",
            TrainConfig {
                lambda: 0.0,
                ..base.clone()
            },
            PartitionStrategy::DatasetId,
        ),
    ];
    let report = compare(&variants, &data, 5, 0)?;
    println!("{:<28} {:>8} {:>8}", "variant", "val", "ood");
    for row in &report.rows {
        println!(
            "{:<28} {:>8.2} {:>8.2}",
            row.label,
            row.mean_val_acc.unwrap_or(f64::NAN),
            row.mean_ood_acc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
