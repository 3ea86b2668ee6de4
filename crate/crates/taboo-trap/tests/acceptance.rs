//! Acceptance suite: one test per shipping criterion, each printing its
//! measurements. Heavy fixtures (trained models) are built once and shared.
//!
//! Requires the MNIST IDX files; set `TABOO_DATA_DIR` or place them under
//! `data/mnist/` at the workspace root (see README).

use std::path::PathBuf;
use std::time::Instant;

use once_cell::sync::Lazy;

use taboo_trap::attack::{run_attack, AttackConfig};
use taboo_trap::checkpoint::save_checkpoint;
use taboo_trap::data::{Dataset, Split};
use taboo_trap::gradcheck::{check_gradients, kink_free_data};
use taboo_trap::graph::{ComputeGraph, NodeId};
use taboo_trap::harness::{
    clean_metrics, evaluate, key_diversity_experiment, run_experiment, run_from_manifest,
    EvalMetrics, ExperimentSpec, KeySpec,
};
use taboo_trap::model::{build_lenet5, Layer, Model};
use taboo_trap::taboo::{
    bind_thresholds, detect, detection_rate, key_f1, profile, violation_count, ActivationProfile,
    Interval, KeyKind, TabooKey,
};
use taboo_trap::tensor::Tensor;
use taboo_trap::train::{taboo_retrain, train_baseline, TrainConfig};

fn data_dir() -> PathBuf {
    if let Ok(dir) = std::env::var("TABOO_DATA_DIR") {
        return PathBuf::from(dir);
    }
    let workspace = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../..")
        .canonicalize()
        .expect("workspace root");
    workspace.join("data/mnist")
}

struct Ctx {
    train: Dataset,
    test: Dataset,
    subset: Dataset,
    baseline: Model,
    baseline_acc: f64,
    baseline_epochs: usize,
    baseline_secs: f64,
    key: TabooKey,
    defended: Model,
    defended_converged: bool,
}

static CTX: Lazy<Ctx> = Lazy::new(|| {
    let dir = data_dir();
    let train = Dataset::load_dir(&dir, Split::Train).unwrap_or_else(|e| {
        panic!(
            "MNIST not found under {} ({e}); fetch the four IDX files first (see README)",
            dir.display()
        )
    });
    let test = Dataset::load_dir(&dir, Split::Test).expect("test split");
    let subset = test.subset(1000, 99);

    let mut baseline = build_lenet5(7);
    let cfg = TrainConfig {
        epochs: 20,
        target_accuracy: Some(0.991),
        seed: 42,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let log = train_baseline(&mut baseline, &train, &test, &cfg).expect("baseline training");
    let baseline_secs = t0.elapsed().as_secs_f64();
    let baseline_epochs = log.records.len();
    let baseline_acc = log.final_accuracy().expect("at least one epoch");

    let prof = profile(&baseline, &train.images).expect("profile");
    let mut key = key_f1(baseline.instrumentation_points());
    key.bind(&prof).expect("bind");

    let mut defended = baseline.clone();
    let retrain_cfg = TrainConfig {
        lambda0: 0.01,
        accuracy_floor: Some(baseline_acc - 0.005),
        max_retrain_epochs: 25,
        seed: 43,
        ..TrainConfig::default()
    };
    let outcome =
        taboo_retrain(&mut defended, &train, &test, &key, &retrain_cfg).expect("retraining");

    Ctx {
        train,
        test,
        subset,
        baseline,
        baseline_acc,
        baseline_epochs,
        baseline_secs,
        key,
        defended,
        defended_converged: outcome.converged,
    }
});

/// FGSM sweep rows on the defended model, shared by criteria 3 and 4.
static FGSM_SWEEP: Lazy<Vec<EvalMetrics>> = Lazy::new(|| {
    let ctx = &*CTX;
    [0.02f32, 0.04, 0.08, 0.1]
        .iter()
        .map(|&eps| {
            let batch = run_attack(
                &ctx.defended,
                &ctx.subset.images,
                &ctx.subset.labels,
                &AttackConfig::fgsm(eps).with_seed(5),
            )
            .expect("fgsm");
            evaluate(
                &ctx.defended,
                Some(&ctx.key),
                (&ctx.subset.images, &ctx.subset.labels),
                &batch,
            )
            .expect("evaluate")
        })
        .collect()
});

#[test]
fn c01_baseline_accuracy() {
    let ctx = &*CTX;
    assert_eq!(
        ctx.baseline.param_count(),
        431_080,
        "LeNet5 parameter count must be exact"
    );
    println!(
        "criterion 1: baseline test accuracy {:.4} after {} epochs in {:.0}s",
        ctx.baseline_acc, ctx.baseline_epochs, ctx.baseline_secs
    );
    assert!(
        ctx.baseline_acc >= 0.988,
        "baseline accuracy {:.4} below 0.988",
        ctx.baseline_acc
    );
    assert!(ctx.baseline_epochs <= 20, "took more than 20 epochs");
    assert!(
        ctx.baseline_secs <= 1800.0,
        "baseline training exceeded 30 minutes"
    );
}

#[test]
fn c02_taboo_retention() {
    let ctx = &*CTX;
    let acc = ctx
        .defended
        .accuracy(&ctx.test.images, &ctx.test.labels)
        .unwrap();
    let fpr = detection_rate(&ctx.defended, &ctx.test.images, &ctx.key).unwrap();
    println!(
        "criterion 2: defended accuracy {:.4} (baseline {:.4}, drop {:.4}), clean FPR {:.4}, converged {}",
        acc,
        ctx.baseline_acc,
        ctx.baseline_acc - acc,
        fpr,
        ctx.defended_converged
    );
    assert!(
        (ctx.baseline_acc - acc).abs() <= 0.005,
        "accuracy moved more than 0.5 points"
    );
    assert!(fpr < 0.01, "clean false-positive rate {fpr:.4} not below 1%");
}

#[test]
fn c03_fgsm_detection() {
    let sweep = &*FGSM_SWEEP;
    for m in sweep.iter() {
        println!(
            "criterion 3: fgsm {} -> A {:.3} D {:?} (fooled {})",
            m.theta, m.a, m.d, m.n_fooled
        );
    }
    let last = sweep.last().unwrap();
    let d_last = last.d.unwrap_or(0.0);
    // sweep trend: non-decreasing with at most one inversion <= 0.05
    let ds: Vec<f64> = sweep.iter().map(|m| m.d.unwrap_or(0.0)).collect();
    let mut inversions = 0;
    let mut worst_inversion = 0.0f64;
    for w in ds.windows(2) {
        if w[1] < w[0] {
            inversions += 1;
            worst_inversion = worst_inversion.max(w[0] - w[1]);
        }
    }
    assert!(
        inversions <= 1 && worst_inversion <= 0.05,
        "D sweep {ds:?} not monotone within tolerance"
    );
    assert!(
        last.a <= 0.15,
        "adversarial accuracy {:.3} above 0.15 at eps=0.1",
        last.a
    );
    assert!(
        d_last >= 0.70,
        "detection rate {:.3} below 0.70 at eps=0.1",
        d_last
    );
}

#[test]
fn c04_attack_strength_ordering() {
    let ctx = &*CTX;
    let df = AttackConfig::deepfool(5).with_seed(11);
    let base_batch = run_attack(&ctx.baseline, &ctx.subset.images, &ctx.subset.labels, &df).unwrap();
    let base_m = evaluate(
        &ctx.baseline,
        None,
        (&ctx.subset.images, &ctx.subset.labels),
        &base_batch,
    )
    .unwrap();
    let def_batch = run_attack(&ctx.defended, &ctx.subset.images, &ctx.subset.labels, &df).unwrap();
    let def_m = evaluate(
        &ctx.defended,
        Some(&ctx.key),
        (&ctx.subset.images, &ctx.subset.labels),
        &def_batch,
    )
    .unwrap();
    let fgsm_d = FGSM_SWEEP.last().unwrap().d.unwrap_or(0.0);
    let df_d = def_m.d.unwrap_or(0.0);
    println!(
        "criterion 4: deepfool(5) baseline A {:.3}; defended A {:.3} D {:.3}; fgsm(0.1) D {:.3}",
        base_m.a, def_m.a, df_d, fgsm_d
    );
    assert!(base_m.a <= 0.05, "deepfool leaves baseline A {:.3} > 0.05", base_m.a);
    assert!(def_m.a <= 0.05, "deepfool leaves defended A {:.3} > 0.05", def_m.a);
    assert!(
        df_d < fgsm_d,
        "weak-against-strong ordering failed: D(deepfool) {df_d:.3} !< D(fgsm) {fgsm_d:.3}"
    );
}

#[test]
fn c05_zero_overhead() {
    // every model and every key: the detector adds exactly nothing
    let models = [
        build_lenet5(0),
        Model::new(
            vec![
                Layer::Conv2d {
                    in_ch: 1,
                    out_ch: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear { in_f: 256, out_f: 10 },
            ],
            vec![1, 8, 8],
            1,
        ),
    ];
    for m in &models {
        let without = m.count_overhead(false);
        let with = m.count_overhead(true);
        println!(
            "criterion 5: {} -> {} MACs / {} params with detector, {} / {} without",
            m.descriptor, with.macs, with.params, without.macs, without.params
        );
        assert_eq!(with, without, "detector must add zero MACs and zero params");
    }
    // LeNet5 layer-by-layer hand sum
    let lenet = &models[0];
    assert_eq!(lenet.count_overhead(true).macs, 288_000 + 1_600_000 + 400_000 + 5_000);
    assert_eq!(lenet.count_overhead(true).params, 431_080);
}

#[test]
fn c06_gradient_oracle() {
    let t0 = Instant::now();
    type Build = Box<dyn Fn(&mut ComputeGraph, &[NodeId]) -> NodeId>;
    let tensor = |shape: &[usize], seed: u64| {
        Tensor::new(shape.to_vec(), kink_free_data(shape.iter().product(), seed, 0.02)).unwrap()
    };

    // one builder per primitive, each reduced to a scalar loss
    let cases: Vec<(&str, Build, Vec<Tensor>)> = vec![
        (
            "conv2d",
            Box::new(|g, ids| {
                let y = g.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap();
                g.sum_all(y)
            }),
            vec![tensor(&[2, 2, 6, 6], 1), tensor(&[3, 2, 3, 3], 2), tensor(&[3], 3)],
        ),
        (
            "linear",
            Box::new(|g, ids| {
                let y = g.linear(ids[0], ids[1], ids[2]).unwrap();
                g.sum_all(y)
            }),
            vec![tensor(&[4, 10], 4), tensor(&[6, 10], 5), tensor(&[6], 6)],
        ),
        (
            "relu",
            Box::new(|g, ids| {
                let y = g.relu(ids[0]);
                g.sum_all(y)
            }),
            vec![tensor(&[40], 7)],
        ),
        (
            "maxpool2d",
            Box::new(|g, ids| {
                let y = g.maxpool2d(ids[0], 2, 2).unwrap();
                g.sum_all(y)
            }),
            vec![{
                let mut t = tensor(&[2, 2, 4, 4], 8);
                for (i, v) in t.data_mut().iter_mut().enumerate() {
                    *v += (i % 7) as f32 * 0.13; // keep window maxima unique
                }
                t
            }],
        ),
        (
            "softmax_cross_entropy",
            Box::new(|g, ids| g.softmax_cross_entropy(ids[0], &[0, 3, 9, 5, 1]).unwrap()),
            vec![tensor(&[5, 10], 9)],
        ),
        (
            "hinge_above_sum",
            Box::new(|g, ids| g.hinge_above_sum(ids[0], 0.4)),
            vec![tensor(&[50], 10)],
        ),
        (
            "interval_dist_sum",
            Box::new(|g, ids| g.interval_dist_sum(ids[0], &[(0.0, 0.3), (0.6, 0.9)])),
            vec![tensor(&[50], 11)],
        ),
        (
            "neg/add/scale/sum/gather/flatten",
            Box::new(|g, ids| {
                let n = g.neg(ids[0]);
                let s = g.add(ids[0], n).unwrap();
                let f = g.flatten(s);
                let p = g.gather_sum(f, &[(0, 1), (1, 2)]).unwrap();
                let t = g.sum_all(f);
                let both = g.add(p, t).unwrap();
                g.scale(both, 1.3)
            }),
            vec![tensor(&[3, 5], 12)],
        ),
    ];
    for (name, build, inputs) in &cases {
        let worst = check_gradients(&|g, ids| build(g, ids), inputs, 100.min(total(inputs)), 77)
            .unwrap_or_else(|e| panic!("criterion 6: {name}: {e}"));
        println!("criterion 6: {name} worst rel err {worst:.2e}");
    }

    // one full LeNet5 graph, input gradients included
    let model = build_lenet5(21);
    let image = Tensor::new(
        vec![2, 1, 28, 28],
        kink_free_data(2 * 28 * 28, 22, 0.02)
            .into_iter()
            .map(|v| v.abs())
            .collect(),
    )
    .unwrap();
    let labels = [3usize, 8];
    let mut inputs = vec![image];
    inputs.extend(model.params.iter().cloned());
    let layers = model.layers.clone();
    let build_lenet = move |g: &mut ComputeGraph, ids: &[NodeId]| -> NodeId {
        let mut node = ids[0];
        let mut p = 1usize;
        for layer in &layers {
            node = match layer {
                Layer::Conv2d { stride, padding, .. } => {
                    let id = g.conv2d(node, ids[p], ids[p + 1], *stride, *padding).unwrap();
                    p += 2;
                    id
                }
                Layer::Linear { .. } => {
                    let id = g.linear(node, ids[p], ids[p + 1]).unwrap();
                    p += 2;
                    id
                }
                Layer::MaxPool2d { kernel, stride } => g.maxpool2d(node, *kernel, *stride).unwrap(),
                Layer::Relu => g.relu(node),
                Layer::Flatten => g.flatten(node),
            };
        }
        g.softmax_cross_entropy(node, &labels).unwrap()
    };
    let worst = check_gradients(&build_lenet, &inputs, 100, 78)
        .unwrap_or_else(|e| panic!("criterion 6: full lenet5 graph: {e}"));
    let secs = t0.elapsed().as_secs_f64();
    println!("criterion 6: full lenet5 graph worst rel err {worst:.2e}; total {secs:.1}s");
    assert!(secs <= 60.0, "gradient oracle exceeded one minute");
}

fn total(inputs: &[Tensor]) -> usize {
    inputs.iter().map(Tensor::numel).sum()
}

#[test]
fn c07_percentile_oracle() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1234);
    let mut checked = 0usize;
    for _ in 0..1000 {
        let len = rng.gen_range(1..400);
        let values: Vec<f32> = (0..len).map(|_| rng.gen_range(0.0..10.0)).collect();
        let prof = ActivationProfile {
            per_layer: vec![values.clone()],
        };
        let mut sorted = values;
        sorted.sort_by(f32::total_cmp);
        for n in [1u32, 5, 50, 90, 100] {
            // independent reference: exact integer nearest-rank
            let rank = ((n as usize * len) + 99) / 100;
            let expected = sorted[rank.max(1) - 1];
            let got = bind_thresholds(&prof, n as f32).unwrap()[0];
            assert_eq!(
                got.to_bits(),
                expected.to_bits(),
                "percentile {n} on {len} values: got {got}, reference {expected}"
            );
            checked += 1;
        }
    }
    println!("criterion 7: {checked} percentile computations match the sort-then-index reference exactly");
}

#[test]
fn c08_detector_semantics() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4321);
    let mut percentile_cases = 0usize;
    let mut interval_cases = 0usize;
    for case in 0..10_000 {
        let layers = rng.gen_range(1..4usize);
        let acts: Vec<Tensor> = (0..layers)
            .map(|_| {
                let len = rng.gen_range(1..40usize);
                Tensor::new(
                    vec![len],
                    (0..len).map(|_| rng.gen_range(0.0f32..4.0)).collect(),
                )
                .unwrap()
            })
            .collect();
        let selector: Vec<usize> = (0..layers).filter(|_| rng.gen_bool(0.7)).collect();
        let selector = if selector.is_empty() { vec![0] } else { selector };

        let (key, expected) = if rng.gen_bool(0.5) {
            let alphas: Vec<f32> = selector.iter().map(|_| rng.gen_range(0.1f32..3.9)).collect();
            let mut key = TabooKey::from_parts(
                selector.clone(),
                KeyKind::MaxPercentile {
                    percentile: 1.0,
                    thresholds: None,
                },
            )
            .unwrap();
            key.attach_thresholds(
                &selector
                    .iter()
                    .copied()
                    .zip(alphas.iter().copied())
                    .collect::<Vec<_>>(),
            )
            .unwrap();
            // brute-force scalar scan
            let mut count = 0u64;
            for (i, &l) in selector.iter().enumerate() {
                for &v in acts[l].data() {
                    if v >= alphas[i] {
                        count += 1;
                    }
                }
            }
            percentile_cases += 1;
            (key, count)
        } else {
            let intervals: Vec<Vec<Interval>> = selector
                .iter()
                .map(|_| {
                    let mut edges: Vec<f32> =
                        (0..4).map(|_| rng.gen_range(0.0f32..4.0)).collect();
                    edges.sort_by(f32::total_cmp);
                    vec![
                        Interval {
                            lo: edges[0],
                            hi: edges[1],
                        },
                        Interval {
                            lo: f32::max(edges[2], edges[1] + 1e-3),
                            hi: f32::max(edges[3], edges[2] + 2e-3),
                        },
                    ]
                })
                .collect();
            let key = TabooKey::from_parts(
                selector.clone(),
                KeyKind::IntervalSet {
                    intervals: intervals.clone(),
                },
            )
            .unwrap();
            let mut count = 0u64;
            for (i, &l) in selector.iter().enumerate() {
                for &v in acts[l].data() {
                    let inside = intervals[i].iter().any(|iv| v >= iv.lo && v <= iv.hi);
                    if !inside {
                        count += 1;
                    }
                }
            }
            interval_cases += 1;
            (key, count)
        };

        let got = violation_count(&key, &acts).unwrap();
        assert_eq!(got, expected, "case {case}: violation count mismatch");
    }
    println!(
        "criterion 8: {percentile_cases} percentile + {interval_cases} interval cases match the brute-force scan"
    );

    // detect's verdict equals (count > 0), via an identity passthrough model
    let dim = 6usize;
    let mut m = Model::new(
        vec![
            Layer::Linear { in_f: dim, out_f: dim },
            Layer::Relu,
            Layer::Linear { in_f: dim, out_f: 2 },
        ],
        vec![dim],
        0,
    );
    let w0 = m.params[0].data_mut();
    w0.fill(0.0);
    for i in 0..dim {
        w0[i * dim + i] = 1.0;
    }
    m.params[1].data_mut().fill(0.0);
    m.params[2].data_mut().fill(0.0);
    m.params[3].data_mut().fill(0.0);
    let mut verdict_checks = 0usize;
    for case in 0..500 {
        let values: Vec<f32> = (0..dim).map(|_| rng.gen_range(0.0f32..2.0)).collect();
        let alpha = rng.gen_range(0.1f32..2.0);
        let mut key = TabooKey::from_parts(
            vec![0],
            KeyKind::MaxPercentile {
                percentile: 1.0,
                thresholds: None,
            },
        )
        .unwrap();
        key.attach_thresholds(&[(0, alpha)]).unwrap();
        let acts = [Tensor::new(vec![dim], values.clone()).unwrap()];
        let count = violation_count(&key, &acts).unwrap();
        let report = detect(&m, &Tensor::new(vec![1, dim], values).unwrap(), &key).unwrap();
        assert_eq!(
            report.samples[0].verdict,
            count > 0,
            "case {case}: verdict must equal (count > 0)"
        );
        assert_eq!(report.samples[0].total, count);
        verdict_checks += 1;
    }
    println!("criterion 8: {verdict_checks} detect verdicts equal (count > 0)");
}

#[test]
fn c09_key_diversity() {
    let ctx = &*CTX;
    let train_cfg = TrainConfig {
        lambda0: 0.01,
        accuracy_floor: Some(ctx.baseline_acc - 0.005),
        max_retrain_epochs: 25,
        seed: 44,
        ..TrainConfig::default()
    };
    let attacks = [
        AttackConfig::fgsm(0.4),
        AttackConfig::pgd_with(0.07, 0.0175, 5),
        AttackConfig::deepfool(5),
    ];
    let report = key_diversity_experiment(
        &ctx.baseline,
        &ctx.train,
        &ctx.test,
        &train_cfg,
        &attacks,
        1000,
        7,
    )
    .expect("key diversity experiment");
    print!("criterion 9 matrix:\n{}", report.to_csv());
    for (i, id) in report.key_ids.iter().enumerate() {
        assert!(
            report.accuracy[i] >= 0.985,
            "{id} accuracy {:.4} below 0.985",
            report.accuracy[i]
        );
        assert!(
            report.fpr[i] < 0.01,
            "{id} clean FPR {:.4} not below 1%",
            report.fpr[i]
        );
    }
    // nine defined entries, all rates
    let mut cells = Vec::new();
    for row in &report.matrix {
        for v in row {
            let v = v.expect("matrix entry undefined (attack fooled nothing)");
            assert!((0.0..=1.0).contains(&v));
            cells.push(v);
        }
    }
    assert_eq!(cells.len(), 9);
    // at least two columns differ by >= 0.05 somewhere
    let mut max_gap = 0.0f64;
    for row in &report.matrix {
        for a in 0..3 {
            for b in (a + 1)..3 {
                let gap = (row[a].unwrap() - row[b].unwrap()).abs();
                max_gap = max_gap.max(gap);
            }
        }
    }
    println!("criterion 9: largest column divergence {max_gap:.3}");
    assert!(
        max_gap >= 0.05,
        "no two key columns differ by at least 0.05 anywhere"
    );
}

#[test]
fn c10_manifest_reproducibility() {
    let ctx = &*CTX;
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("defended.ttrp");
    save_checkpoint(&ctx.defended, Some(&ctx.key), &ckpt).unwrap();

    let spec = ExperimentSpec {
        data_dir: data_dir(),
        checkpoint: ckpt,
        key: KeySpec::Embedded,
        train: TrainConfig::default(),
        attacks: vec![
            AttackConfig::fgsm(0.08),
            AttackConfig::deepfool(2),
        ],
        subset: 200,
        seed: 2024,
        out_csv: dir.path().join("metrics.csv"),
        out_manifest: dir.path().join("metrics.manifest.txt"),
        save_model: None,
    };
    run_experiment(&spec).expect("first run");
    let first = std::fs::read(&spec.out_csv).unwrap();
    let manifest_path = spec.out_manifest.clone();

    // rerun strictly from the manifest
    std::fs::remove_file(&spec.out_csv).unwrap();
    run_from_manifest(&manifest_path).expect("manifest rerun");
    let second = std::fs::read(&spec.out_csv).unwrap();
    println!(
        "criterion 10: manifest rerun reproduced {} bytes of CSV byte-for-byte: {}",
        first.len(),
        first == second
    );
    assert_eq!(first, second, "manifest rerun must reproduce the CSV exactly");
}
