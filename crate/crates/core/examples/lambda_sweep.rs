//! Sweeps the variance weight over a log grid, streaming one CSV row per
//! grid point to stdout. Set `UNSHUFFLE_THREADS` to cap parallelism.
//!
//!     cargo run --release --example lambda_sweep

use unshuffle::datagen::{gen_spurious, SpuriousSpec};
use unshuffle::eval::{sweep, ExperimentData, SweepAxis, SweepSpec};
use unshuffle::{PartitionStrategy, TrainConfig};

fn main() -> unshuffle::Result<()> {
    let splits = gen_spurious(&SpuriousSpec::default(), 0)?;
    let data = ExperimentData {
        sources: splits.train,
        val: splits.val,
        test: splits.test,
    };
    let spec = SweepSpec {
        axis: SweepAxis::Lambda,
        grid: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1000.0],
        repeats: 3,
        base: TrainConfig::default(),
        strategy: PartitionStrategy::DatasetId,
        base_seed: 0,
    };
    let mut out = std::io::stdout();
    let report = sweep(&spec, &data, Some(&mut out))?;
    let best = report
        .rows
        .iter()
        .filter_map(|r| Some((r.axis_value?, r.mean_ood_acc?)))
        .max_by(|a, b| a.1.total_cmp(&b.1));
    if let Some((lambda, acc)) = best {
        eprintln!("best lambda {lambda}: ood accuracy {acc:.2}");
    }
    Ok(())
}
