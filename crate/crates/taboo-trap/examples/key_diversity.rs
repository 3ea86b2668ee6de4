//! Trains one defended model per key family (f1 percentile, f2 first-layer
//! interval, f3 interval union) from the same baseline and prints the
//! attack-by-key detection matrix with per-key accuracy and FPR.
//!
//! ```text
//! cargo run --release --example key_diversity -- [data_dir] [baseline.ttrp]
//! ```

use std::path::PathBuf;

use taboo_trap::attack::AttackConfig;
use taboo_trap::checkpoint::load_checkpoint;
use taboo_trap::data::{Dataset, Split};
use taboo_trap::harness::key_diversity_experiment;
use taboo_trap::train::TrainConfig;

fn main() -> taboo_trap::Result<()> {
    let mut args = std::env::args().skip(1);
    let data_dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let base = PathBuf::from(args.next().unwrap_or_else(|| "baseline.ttrp".into()));

    let train = Dataset::load_dir(&data_dir, Split::Train)?;
    let test = Dataset::load_dir(&data_dir, Split::Test)?;
    let (baseline, _) = load_checkpoint(&base)?;
    let baseline_acc = baseline.accuracy(&test.images, &test.labels)?;

    let cfg = TrainConfig {
        lambda0: 0.01,
        accuracy_floor: Some(baseline_acc - 0.005),
        ..TrainConfig::default()
    };
    let attacks = [
        AttackConfig::fgsm(0.4),
        AttackConfig::pgd_with(0.07, 0.0175, 5),
        AttackConfig::deepfool(5),
    ];
    let report = key_diversity_experiment(&baseline, &train, &test, &cfg, &attacks, 1000, 7)?;
    print!("{}", report.to_csv());
    Ok(())
}
