//! Trains the LeNet5 baseline on MNIST and saves a checkpoint.
//!
//! ```text
//! cargo run --release --example train_baseline -- [data_dir] [out.ttrp]
//! ```

use std::path::PathBuf;

use taboo_trap::checkpoint::save_checkpoint;
use taboo_trap::data::{Dataset, Split};
use taboo_trap::model::build_lenet5;
use taboo_trap::train::{train_baseline, TrainConfig};

fn main() -> taboo_trap::Result<()> {
    let mut args = std::env::args().skip(1);
    let data_dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let out = PathBuf::from(args.next().unwrap_or_else(|| "baseline.ttrp".into()));

    let train = Dataset::load_dir(&data_dir, Split::Train)?;
    let test = Dataset::load_dir(&data_dir, Split::Test)?;
    println!("loaded {} train / {} test images", train.len(), test.len());

    let mut model = build_lenet5(7);
    println!(
        "LeNet5: {} parameters, {} instrumentation points",
        model.param_count(),
        model.instrumentation_points()
    );

    let cfg = TrainConfig {
        epochs: 20,
        target_accuracy: Some(0.991),
        ..TrainConfig::default()
    };
    let log = train_baseline(&mut model, &train, &test, &cfg)?;
    for r in &log.records {
        println!(
            "epoch {:2}: loss {:.4}  test accuracy {:.4}",
            r.epoch, r.loss, r.accuracy
        );
    }
    save_checkpoint(&model, None, &out)?;
    println!("checkpoint written to {}", out.display());
    Ok(())
}
