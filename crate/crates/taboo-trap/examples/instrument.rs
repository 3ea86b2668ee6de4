//! Installs the defense into a trained baseline: profiles activations on the
//! training split, binds the max-1st-percentile key, retrains under the
//! combined loss, and saves the defended checkpoint (key embedded).
//!
//! ```text
//! cargo run --release --example instrument -- [data_dir] [baseline.ttrp] [defended.ttrp]
//! ```

use std::path::PathBuf;

use taboo_trap::checkpoint::{load_checkpoint, save_checkpoint};
use taboo_trap::data::{Dataset, Split};
use taboo_trap::taboo::{detection_rate, key_f1, profile};
use taboo_trap::train::{taboo_retrain, TrainConfig};

fn main() -> taboo_trap::Result<()> {
    let mut args = std::env::args().skip(1);
    let data_dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let base = PathBuf::from(args.next().unwrap_or_else(|| "baseline.ttrp".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "defended.ttrp".into()));

    let train = Dataset::load_dir(&data_dir, Split::Train)?;
    let test = Dataset::load_dir(&data_dir, Split::Test)?;
    let (mut model, _) = load_checkpoint(&base)?;
    let baseline_acc = model.accuracy(&test.images, &test.labels)?;
    println!("baseline accuracy {:.4}", baseline_acc);

    // profile the *original* network, then freeze the thresholds
    let prof = profile(&model, &train.images)?;
    let mut key = key_f1(model.instrumentation_points());
    key.bind(&prof)?;
    println!("bound key: {:?}", key.kind());
    println!(
        "pre-retrain clean detection rate: {:.4}",
        detection_rate(&model, &test.images, &key)?
    );

    let cfg = TrainConfig {
        lambda0: 0.01,
        accuracy_floor: Some(baseline_acc - 0.005),
        ..TrainConfig::default()
    };
    let outcome = taboo_retrain(&mut model, &train, &test, &key, &cfg)?;
    for r in &outcome.log.records {
        println!(
            "epoch {:2}: loss {:8.4}  acc {:.4}  clean detection {:.4}  lambda {:.1e}  lr {:.1e}",
            r.epoch, r.loss, r.accuracy, r.fpr, r.lambda, r.lr
        );
    }
    println!(
        "converged: {} (final accuracy {:.4}, clean detection {:.4})",
        outcome.converged,
        model.accuracy(&test.images, &test.labels)?,
        detection_rate(&model, &test.images, &key)?
    );
    save_checkpoint(&model, Some(&key), &out)?;
    println!("defended checkpoint written to {}", out.display());
    Ok(())
}
