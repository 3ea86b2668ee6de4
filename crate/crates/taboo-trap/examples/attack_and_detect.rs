//! Attacks a defended checkpoint with the FGSM sweep, PGD, and DeepFool,
//! printing one metrics row per attack (A, D, AD, FPR).
//!
//! ```text
//! cargo run --release --example attack_and_detect -- [data_dir] [defended.ttrp]
//! ```

use std::path::PathBuf;

use taboo_trap::attack::{run_attack, AttackConfig};
use taboo_trap::checkpoint::load_checkpoint;
use taboo_trap::data::{Dataset, Split};
use taboo_trap::harness::{clean_metrics, evaluate, metrics_csv};

fn main() -> taboo_trap::Result<()> {
    let mut args = std::env::args().skip(1);
    let data_dir = PathBuf::from(args.next().unwrap_or_else(|| "data/mnist".into()));
    let ckpt = PathBuf::from(args.next().unwrap_or_else(|| "defended.ttrp".into()));

    let test = Dataset::load_dir(&data_dir, Split::Test)?;
    let (model, key) = load_checkpoint(&ckpt)?;
    let key = key.expect("checkpoint carries no key; run the instrument example first");

    let eval_set = test.subset(1000, 99);
    let mut rows = vec![clean_metrics(
        &model,
        Some(&key),
        &eval_set.images,
        &eval_set.labels,
    )?];

    let battery = [
        AttackConfig::fgsm(0.02),
        AttackConfig::fgsm(0.04),
        AttackConfig::fgsm(0.08),
        AttackConfig::fgsm(0.1),
        AttackConfig::pgd_with(0.07, 0.0175, 5),
        AttackConfig::deepfool(5),
    ];
    for (i, attack) in battery.into_iter().enumerate() {
        let cfg = attack.with_seed(100 + i as u64);
        let batch = run_attack(&model, &eval_set.images, &eval_set.labels, &cfg)?;
        rows.push(evaluate(
            &model,
            Some(&key),
            (&eval_set.images, &eval_set.labels),
            &batch,
        )?);
    }
    print!("{}", metrics_csv(&rows));
    Ok(())
}
