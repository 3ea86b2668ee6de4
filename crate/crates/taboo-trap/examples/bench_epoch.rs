use std::path::Path;
use taboo_trap::attack::{run_attack, AttackConfig};
use taboo_trap::checkpoint::{load_checkpoint, save_checkpoint};
use taboo_trap::data::{Dataset, Split};
use taboo_trap::harness::{clean_metrics, evaluate};
use taboo_trap::taboo::key_f3;
use taboo_trap::train::{taboo_retrain, TrainConfig};

fn main() {
    let dir = Path::new("data/mnist");
    let train = Dataset::load_dir(dir, Split::Train).unwrap();
    let test = Dataset::load_dir(dir, Split::Test).unwrap();
    let (baseline, _) = load_checkpoint(Path::new("/tmp/baseline.ttrp")).unwrap();
    let base_acc = baseline.accuracy(&test.images, &test.labels).unwrap();
    let subset = test.subset(1000, 99);

    let key = key_f3(3);
    let mut model = baseline.clone();
    let cfg = TrainConfig {
        lambda0: 0.1,
        plateau_window: 2,
        accuracy_floor: Some(base_acc - 0.005),
        max_retrain_epochs: 45,
        seed: 43,
        ..TrainConfig::default()
    };
    let out = taboo_retrain(&mut model, &train, &test, &key, &cfg).unwrap();
    println!("f3 strong: converged={} epochs={}", out.converged, out.log.records.len());
    for r in &out.log.records {
        println!("  ep {:2}: loss {:9.4} acc {:.4} fpr {:.4} lambda {:.2e} lr {:.2e}", r.epoch, r.loss, r.accuracy, r.fpr, r.lambda, r.lr);
    }
    save_checkpoint(&model, Some(&key), Path::new("/tmp/defended_f3.ttrp")).unwrap();
    let clean = clean_metrics(&model, Some(&key), &subset.images, &subset.labels).unwrap();
    println!("clean subset: acc {:.4} fpr {:.4}", clean.a, clean.fpr);
    for cfg in [AttackConfig::fgsm(0.4), AttackConfig::pgd_with(0.07, 0.0175, 5), AttackConfig::deepfool(5)] {
        let b = run_attack(&model, &subset.images, &subset.labels, &cfg.with_seed(5)).unwrap();
        let m = evaluate(&model, Some(&key), (&subset.images, &subset.labels), &b).unwrap();
        println!("  {} {}: A {:.3} D {:?} AD {:?}", m.attack, m.theta, m.a,
            m.d.map(|v|(v*1000.0).round()/1000.0), m.ad.map(|v|(v*1000.0).round()/1000.0));
    }
}
