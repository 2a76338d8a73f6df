//! Averages the predicted probabilities of four independently seeded models
//! and compares the result with the members on their own.
//!
//!     cargo run --release --example ensemble

use unshuffle::datagen::{gen_spurious, SpuriousSpec};
use unshuffle::eval::{accuracy, ensemble_accuracy};
use unshuffle::{train, HeadSelector, TrainConfig};

fn main() -> unshuffle::Result<()> {
    let splits = gen_spurious(&SpuriousSpec::default(), 0)?;
    let mut models = Vec::new();
    for m in 0..4u64 {
        let cfg = TrainConfig {
            seed: 100_000 * m,
            ..TrainConfig::default()
        };
        let (params, _) = train(&cfg, &splits.train, &splits.val)?;
        println!("member {m}: ood {:.2}", accuracy(&params, HeadSelector::Merged, &splits.test)?);
        models.push(params);
    }
    println!("ensemble: ood {:.2}", ensemble_accuracy(&models, HeadSelector::Merged, &splits.test)?);
    Ok(())
}
