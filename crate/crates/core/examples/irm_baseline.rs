//! IRMv1 with a single shared head next to the per-environment heads with a
//! variance penalty, both at a few penalty weights.
//!
//!     cargo run --release --example irm_baseline

use unshuffle::datagen::{gen_spurious, SpuriousSpec};
use unshuffle::eval::{compare, ExperimentData, Variant};
use unshuffle::{Objective, PartitionStrategy, TrainConfig};

fn main() -> unshuffle::Result<()> {
    let splits = gen_spurious(&SpuriousSpec::default(), 0)?;
    let data = ExperimentData {
        sources: splits.train,
        val: splits.val,
        test: splits.test,
    };
    let mut variants = vec![Variant::erm(&TrainConfig::default())];
    for lambda in [0.1, 1.0, 10.0] {
        for objective in [Objective::Irmv1, Objective::Eq2] {
            let cfg = TrainConfig {
                lambda,
                objective,
                ..TrainConfig::default()
            };
            variants.push(Variant::new(format!("{objective:?} lambda={lambda}"), cfg, PartitionStrategy::DatasetId));
        }
    }
    for row in &compare(&variants, &data, 3, 0)?.rows {
        match row.mean_ood_acc {
            Some(acc) => println!("{:<24} ood {acc:.2}", row.label),
            None => println!("{:<24} failed: {}", row.label, row.error.as_deref().unwrap_or("")),
        }
    }
    Ok(())
}
