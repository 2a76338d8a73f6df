//! Two source datasets with different spurious strengths, treated either as
//! one pooled dataset or as two environments.
//!
//!     cargo run --release --example multi_dataset

use unshuffle::datagen::{gen_spurious, SpuriousSpec};
use unshuffle::eval::{compare, ExperimentData, Variant};
use unshuffle::{PartitionStrategy, TrainConfig};

fn main() -> unshuffle::Result<()> {
    let spec = SpuriousSpec {
        env_agreement: vec![0.95, 0.7],
        ..SpuriousSpec::default()
    };
    let splits = gen_spurious(&spec, 2)?;
    let data = ExperimentData {
        sources: splits.train,
        val: splits.val,
        test: splits.test,
    };
    let base = TrainConfig::default();
    let variants = [
        Variant::erm(&base),
        Variant::new("dataset environments", base, PartitionStrategy::DatasetId),
    ];
    for row in &compare(&variants, &data, 5, 0)?.rows {
        println!(
            "{:<22} ood {:.2} ± {:.2}",
            row.label,
            row.mean_ood_acc.unwrap_or(f64::NAN),
            row.std_ood_acc.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
