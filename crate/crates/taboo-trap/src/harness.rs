//! Experiment orchestration and the metric tables.
//!
//! `A` is accuracy on adversarial samples; `D` the detection rate among
//! adversarial samples that fooled the model; `AD` the detection rate among
//! adversarial samples the model still classifies correctly; `FPR` the
//! detection rate on clean data. Denominators travel with every rate, and a
//! rate with an empty denominator is reported as absent rather than faked.
//!
//! `run_experiment` drives profile → bind → retrain → attack → evaluate from
//! a declarative spec, emits a fixed-schema CSV plus a flat key=value
//! manifest, and is bit-reproducible from that manifest alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::attack::{run_attack, AdversarialBatch, AttackConfig, AttackMethod};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::taboo::{detect_flags, key_f1, key_f2, key_f3, profile, KeyKind, TabooKey};
use crate::tensor::Tensor;
use crate::train::{taboo_retrain, TrainConfig};

/// One row of the metrics table, with every denominator it was computed
/// from. Degenerate attack outputs (input returned unchanged) are excluded
/// from the D/AD denominators and reported separately.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalMetrics {
    pub attack: String,
    pub theta: String,
    /// Accuracy on the (adversarial or clean) samples.
    pub a: f64,
    /// Detection rate among fooling samples; absent when nothing fooled.
    pub d: Option<f64>,
    /// Detection rate among correctly classified samples; absent when
    /// nothing survived.
    pub ad: Option<f64>,
    /// Detection rate on the clean reference set.
    pub fpr: f64,
    pub n_samples: usize,
    pub n_fooled: usize,
    pub n_correct: usize,
    pub n_clean: usize,
    pub n_degenerate: usize,
    pub detected_fooled: usize,
    pub detected_correct: usize,
}

impl EvalMetrics {
    fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        let rates_ok = in_unit(self.a)
            && in_unit(self.fpr)
            && self.d.is_none_or(in_unit)
            && self.ad.is_none_or(in_unit);
        if !rates_ok {
            return Err(Error::InvalidConfig(format!(
                "metric rate left [0,1]: {self:?}"
            )));
        }
        Ok(())
    }
}

fn rate(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Flags for a clean reference set under an optional key (no key: nothing
/// is ever flagged).
fn clean_flags(model: &Model, images: &Tensor, key: Option<&TabooKey>) -> Result<Vec<bool>> {
    match key {
        Some(k) => detect_flags(model, images, k),
        None => Ok(vec![false; images.shape()[0]]),
    }
}

/// Scores one adversarial batch against the model + key, with the clean set
/// supplying the false-positive rate.
pub fn evaluate(
    model: &Model,
    key: Option<&TabooKey>,
    clean: (&Tensor, &[u8]),
    batch: &AdversarialBatch,
) -> Result<EvalMetrics> {
    let n = batch.labels.len();
    let detected = clean_flags(model, &batch.perturbed, key)?;
    let clean_detected = clean_flags(model, clean.0, key)?;

    let mut n_fooled = 0;
    let mut n_correct = 0;
    let mut detected_fooled = 0;
    let mut detected_correct = 0;
    let mut correct_all = 0;
    let mut n_degenerate = 0;
    for i in 0..n {
        let correct = batch.adv_pred[i] == batch.labels[i];
        if correct {
            correct_all += 1;
        }
        if batch.degenerate[i] {
            n_degenerate += 1;
            continue;
        }
        if correct {
            n_correct += 1;
            detected_correct += detected[i] as usize;
        } else {
            n_fooled += 1;
            detected_fooled += detected[i] as usize;
        }
    }

    let metrics = EvalMetrics {
        attack: batch.config.method.name().to_string(),
        theta: batch.config.theta(),
        a: correct_all as f64 / n as f64,
        d: rate(detected_fooled, n_fooled),
        ad: rate(detected_correct, n_correct),
        fpr: clean_detected.iter().filter(|&&f| f).count() as f64 / clean.1.len() as f64,
        n_samples: n,
        n_fooled,
        n_correct,
        n_clean: clean.1.len(),
        n_degenerate,
        detected_fooled,
        detected_correct,
    };
    metrics.validate()?;
    Ok(metrics)
}

/// The no-attack reference row: clean inputs scored exactly like an
/// adversarial batch would be.
pub fn clean_metrics(
    model: &Model,
    key: Option<&TabooKey>,
    images: &Tensor,
    labels: &[u8],
) -> Result<EvalMetrics> {
    let preds = model.predict(images)?;
    let detected = clean_flags(model, images, key)?;
    let n = labels.len();
    let mut n_fooled = 0;
    let mut n_correct = 0;
    let mut detected_fooled = 0;
    let mut detected_correct = 0;
    for i in 0..n {
        if preds[i] == labels[i] {
            n_correct += 1;
            detected_correct += detected[i] as usize;
        } else {
            n_fooled += 1;
            detected_fooled += detected[i] as usize;
        }
    }
    let fpr = detected.iter().filter(|&&f| f).count() as f64 / n as f64;
    let metrics = EvalMetrics {
        attack: "clean".to_string(),
        theta: String::new(),
        a: n_correct as f64 / n as f64,
        d: rate(detected_fooled, n_fooled),
        ad: rate(detected_correct, n_correct),
        fpr,
        n_samples: n,
        n_fooled,
        n_correct,
        n_clean: n,
        n_degenerate: 0,
        detected_fooled,
        detected_correct,
    };
    metrics.validate()?;
    Ok(metrics)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

/// Fixed-schema CSV: `attack,theta,A,D,AD,FPR,n_fooled,n_correct,n_clean`.
pub fn metrics_csv(rows: &[EvalMetrics]) -> String {
    let mut out = String::from("attack,theta,A,D,AD,FPR,n_fooled,n_correct,n_clean\n");
    for m in rows {
        let _ = writeln!(
            out,
            "{},{},{:.6},{},{},{:.6},{},{},{}",
            m.attack,
            m.theta,
            m.a,
            fmt_opt(m.d),
            fmt_opt(m.ad),
            m.fpr,
            m.n_fooled,
            m.n_correct,
            m.n_clean
        );
    }
    out
}

/// How the experiment obtains its taboo key.
#[derive(Debug, Clone, PartialEq)]
pub enum KeySpec {
    /// Plain undefended evaluation.
    None,
    /// Use the key stored in the checkpoint.
    Embedded,
    /// Build + bind + retrain the named key family.
    F1,
    F2,
    F3,
    /// Max-percentile key at the given percentile on all layers.
    Percentile(f32),
}

impl KeySpec {
    pub fn id(&self) -> String {
        match self {
            KeySpec::None => "none".into(),
            KeySpec::Embedded => "embedded".into(),
            KeySpec::F1 => "f1".into(),
            KeySpec::F2 => "f2".into(),
            KeySpec::F3 => "f3".into(),
            KeySpec::Percentile(p) => format!("p{p}"),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => KeySpec::None,
            "embedded" => KeySpec::Embedded,
            "f1" => KeySpec::F1,
            "f2" => KeySpec::F2,
            "f3" => KeySpec::F3,
            other => {
                if let Some(p) = other.strip_prefix('p') {
                    KeySpec::Percentile(p.parse().map_err(|_| {
                        Error::InvalidConfig(format!("bad key id '{other}'"))
                    })?)
                } else {
                    return Err(Error::InvalidConfig(format!("bad key id '{other}'")));
                }
            }
        })
    }
}

/// Declarative description of one experiment run.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub data_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub key: KeySpec,
    /// Retraining knobs, used when the key is built fresh.
    pub train: TrainConfig,
    pub attacks: Vec<AttackConfig>,
    /// Evaluation subset size drawn (seeded) from the test split.
    pub subset: usize,
    pub seed: u64,
    pub out_csv: PathBuf,
    pub out_manifest: PathBuf,
    /// Where to save the instrumented model, when retraining happened.
    pub save_model: Option<PathBuf>,
}

pub struct ExperimentReport {
    pub rows: Vec<EvalMetrics>,
    pub csv: String,
    pub model: Model,
    pub key: Option<TabooKey>,
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Executes the experiment spec end to end, writing the CSV and manifest.
/// Any stage failure names the stage and removes partial outputs.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let result = run_experiment_inner(spec);
    if result.is_err() {
        for path in [&spec.out_csv, &spec.out_manifest]
            .into_iter()
            .chain(spec.save_model.iter())
        {
            let _ = std::fs::remove_file(path);
        }
    }
    result
}

fn run_experiment_inner(spec: &ExperimentSpec) -> Result<ExperimentReport> {
    let train_ds = stage("load-data", Dataset::load_dir(&spec.data_dir, Split::Train))?;
    let test_ds = stage("load-data", Dataset::load_dir(&spec.data_dir, Split::Test))?;
    let (mut model, embedded) = stage("load-checkpoint", load_checkpoint(&spec.checkpoint))?;

    let key: Option<TabooKey> = match &spec.key {
        KeySpec::None => None,
        KeySpec::Embedded => Some(stage(
            "load-checkpoint",
            embedded.ok_or_else(|| {
                Error::MalformedCheckpoint("checkpoint carries no key block".into())
            }),
        )?),
        fresh => {
            let layers = model.instrumentation_points();
            let mut key = match fresh {
                KeySpec::F1 => key_f1(layers),
                KeySpec::F2 => key_f2(),
                KeySpec::F3 => key_f3(layers),
                KeySpec::Percentile(p) => TabooKey::from_parts(
                    (0..layers).collect(),
                    KeyKind::MaxPercentile {
                        percentile: *p,
                        thresholds: None,
                    },
                )?,
                _ => unreachable!(),
            };
            if !key.is_bound() {
                let prof = stage("profile", profile(&model, &train_ds.images))?;
                stage("bind", key.bind(&prof))?;
            }
            stage(
                "retrain",
                taboo_retrain(&mut model, &train_ds, &test_ds, &key, &spec.train).map(|_| ()),
            )?;
            if let Some(path) = &spec.save_model {
                stage("retrain", save_checkpoint(&model, Some(&key), path))?;
            }
            Some(key)
        }
    };

    let eval_set = test_ds.subset(spec.subset.min(test_ds.len()), spec.seed);
    let mut rows = vec![stage(
        "evaluate",
        clean_metrics(&model, key.as_ref(), &eval_set.images, &eval_set.labels),
    )?];
    for (i, attack) in spec.attacks.iter().enumerate() {
        let cfg = attack.clone().with_seed(spec.seed.wrapping_add(1 + i as u64));
        let batch = stage(
            &format!("attack:{} {}", cfg.method.name(), cfg.theta()),
            run_attack(&model, &eval_set.images, &eval_set.labels, &cfg),
        )?;
        rows.push(stage(
            "evaluate",
            evaluate(
                &model,
                key.as_ref(),
                (&eval_set.images, &eval_set.labels),
                &batch,
            ),
        )?);
    }

    let csv = metrics_csv(&rows);
    stage("write-report", std::fs::write(&spec.out_csv, &csv).map_err(Error::from))?;
    stage(
        "write-report",
        std::fs::write(&spec.out_manifest, manifest_string(spec)).map_err(Error::from),
    )?;
    Ok(ExperimentReport {
        rows,
        csv,
        model,
        key,
    })
}

// ── manifest ────────────────────────────────────────────────────────────

fn attack_method_id(m: AttackMethod) -> &'static str {
    m.name()
}

/// Flat key=value rendering of the full spec: every hyperparameter and seed
/// needed to reproduce the run.
pub fn manifest_string(spec: &ExperimentSpec) -> String {
    let mut out = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(out, "{k}={v}");
    };
    kv("schema", "1".into());
    kv("data_dir", spec.data_dir.display().to_string());
    kv("checkpoint", spec.checkpoint.display().to_string());
    kv("key", spec.key.id());
    kv("subset", spec.subset.to_string());
    kv("seed", spec.seed.to_string());
    kv("out_csv", spec.out_csv.display().to_string());
    kv("out_manifest", spec.out_manifest.display().to_string());
    if let Some(p) = &spec.save_model {
        kv("save_model", p.display().to_string());
    }
    let t = &spec.train;
    kv("train.epochs", t.epochs.to_string());
    kv("train.batch_size", t.batch_size.to_string());
    kv("train.lr", format!("{}", t.lr));
    kv("train.momentum", format!("{}", t.momentum));
    kv("train.lambda0", format!("{}", t.lambda0));
    kv("train.lambda_growth", format!("{}", t.lambda_growth));
    kv("train.lr_decay", format!("{}", t.lr_decay));
    kv("train.plateau_window", t.plateau_window.to_string());
    kv("train.max_retrain_epochs", t.max_retrain_epochs.to_string());
    kv("train.target_fpr", format!("{}", t.target_fpr));
    if let Some(f) = t.accuracy_floor {
        kv("train.accuracy_floor", format!("{f}"));
    }
    if let Some(a) = t.target_accuracy {
        kv("train.target_accuracy", format!("{a}"));
    }
    kv("train.from_scratch", t.from_scratch.to_string());
    kv("train.seed", t.seed.to_string());
    kv("attacks", spec.attacks.len().to_string());
    for (i, a) in spec.attacks.iter().enumerate() {
        kv(&format!("attack.{i}.method"), attack_method_id(a.method).into());
        kv(&format!("attack.{i}.eps"), format!("{}", a.eps));
        kv(&format!("attack.{i}.step"), format!("{}", a.step));
        kv(&format!("attack.{i}.iters"), a.iters.to_string());
        kv(&format!("attack.{i}.overshoot"), format!("{}", a.overshoot));
        kv(&format!("attack.{i}.random_start"), a.random_start.to_string());
        kv(&format!("attack.{i}.seed"), a.seed.to_string());
    }
    out
}

fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

fn lookup<'a>(kvs: &'a [(String, String)], key: &str) -> Result<&'a str> {
    kvs.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::InvalidConfig(format!("manifest missing '{key}'")))
}

fn lookup_opt<'a>(kvs: &'a [(String, String)], key: &str) -> Option<&'a str> {
    kvs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
}

fn parse_num<T: std::str::FromStr>(kvs: &[(String, String)], key: &str) -> Result<T> {
    lookup(kvs, key)?
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("manifest field '{key}' is malformed")))
}

/// Rebuilds an experiment spec from its manifest rendering.
pub fn spec_from_manifest(text: &str) -> Result<ExperimentSpec> {
    let kvs = parse_kv(text);
    let train = TrainConfig {
        epochs: parse_num(&kvs, "train.epochs")?,
        batch_size: parse_num(&kvs, "train.batch_size")?,
        lr: parse_num(&kvs, "train.lr")?,
        momentum: parse_num(&kvs, "train.momentum")?,
        lambda0: parse_num(&kvs, "train.lambda0")?,
        lambda_growth: parse_num(&kvs, "train.lambda_growth")?,
        lr_decay: parse_num(&kvs, "train.lr_decay")?,
        plateau_window: parse_num(&kvs, "train.plateau_window")?,
        max_retrain_epochs: parse_num(&kvs, "train.max_retrain_epochs")?,
        target_fpr: parse_num(&kvs, "train.target_fpr")?,
        accuracy_floor: lookup_opt(&kvs, "train.accuracy_floor")
            .map(|v| v.parse())
            .transpose()
            .map_err(|_| Error::InvalidConfig("bad train.accuracy_floor".into()))?,
        target_accuracy: lookup_opt(&kvs, "train.target_accuracy")
            .map(|v| v.parse())
            .transpose()
            .map_err(|_| Error::InvalidConfig("bad train.target_accuracy".into()))?,
        from_scratch: parse_num(&kvs, "train.from_scratch")?,
        seed: parse_num(&kvs, "train.seed")?,
    };
    let n_attacks: usize = parse_num(&kvs, "attacks")?;
    let mut attacks = Vec::with_capacity(n_attacks);
    for i in 0..n_attacks {
        let method = match lookup(&kvs, &format!("attack.{i}.method"))? {
            "fgsm" => AttackMethod::Fgsm,
            "pgd" => AttackMethod::Pgd,
            "deepfool" => AttackMethod::DeepFool,
            other => {
                return Err(Error::InvalidConfig(format!("unknown attack '{other}'")))
            }
        };
        attacks.push(AttackConfig {
            method,
            eps: parse_num(&kvs, &format!("attack.{i}.eps"))?,
            step: parse_num(&kvs, &format!("attack.{i}.step"))?,
            iters: parse_num(&kvs, &format!("attack.{i}.iters"))?,
            overshoot: parse_num(&kvs, &format!("attack.{i}.overshoot"))?,
            random_start: parse_num(&kvs, &format!("attack.{i}.random_start"))?,
            seed: parse_num(&kvs, &format!("attack.{i}.seed"))?,
        });
    }
    Ok(ExperimentSpec {
        data_dir: PathBuf::from(lookup(&kvs, "data_dir")?),
        checkpoint: PathBuf::from(lookup(&kvs, "checkpoint")?),
        key: KeySpec::parse(lookup(&kvs, "key")?)?,
        train,
        attacks,
        subset: parse_num(&kvs, "subset")?,
        seed: parse_num(&kvs, "seed")?,
        out_csv: PathBuf::from(lookup(&kvs, "out_csv")?),
        out_manifest: PathBuf::from(lookup(&kvs, "out_manifest")?),
        save_model: lookup_opt(&kvs, "save_model").map(PathBuf::from),
    })
}

pub fn run_from_manifest(path: &Path) -> Result<ExperimentReport> {
    let text = std::fs::read_to_string(path)?;
    let spec = spec_from_manifest(&text)?;
    run_experiment(&spec)
}

// ── key-diversity experiment ────────────────────────────────────────────

/// Detection matrix across the three key families, with per-key clean
/// accuracy and false-positive rates.
pub struct KeyDiversityReport {
    pub key_ids: Vec<String>,
    pub attack_labels: Vec<String>,
    /// `matrix[attack][key]` = detection rate D on fooling samples.
    pub matrix: Vec<Vec<Option<f64>>>,
    pub accuracy: Vec<f64>,
    pub fpr: Vec<f64>,
    pub models: Vec<Model>,
    pub keys: Vec<TabooKey>,
}

impl KeyDiversityReport {
    /// Attacks down the rows, keys across the columns, accuracy + FPR rows
    /// appended.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("row");
        for id in &self.key_ids {
            let _ = write!(out, ",{id}");
        }
        out.push('\n');
        for (label, row) in self.attack_labels.iter().zip(&self.matrix) {
            let _ = write!(out, "{label}");
            for v in row {
                let _ = write!(out, ",{}", fmt_opt(*v));
            }
            out.push('\n');
        }
        let _ = write!(out, "accuracy");
        for v in &self.accuracy {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
        let _ = write!(out, "fpr");
        for v in &self.fpr {
            let _ = write!(out, ",{v:.6}");
        }
        out.push('\n');
        out
    }
}

/// Trains one instrumented model per key family (from the same baseline) and
/// evaluates each against the attack battery.
pub fn key_diversity_experiment(
    baseline: &Model,
    train_ds: &Dataset,
    test_ds: &Dataset,
    train_cfg: &TrainConfig,
    attacks: &[AttackConfig],
    subset: usize,
    seed: u64,
) -> Result<KeyDiversityReport> {
    let layers = baseline.instrumentation_points();
    let prof = profile(baseline, &train_ds.images)?;
    let mut f1 = key_f1(layers);
    f1.bind(&prof)?;
    let candidates: Vec<(String, TabooKey)> = vec![
        ("f1".into(), f1),
        ("f2".into(), key_f2()),
        ("f3".into(), key_f3(layers)),
    ];

    let eval_set = test_ds.subset(subset.min(test_ds.len()), seed);
    let mut report = KeyDiversityReport {
        key_ids: Vec::new(),
        attack_labels: attacks
            .iter()
            .map(|a| format!("{} {}", a.method.name(), a.theta()))
            .collect(),
        matrix: vec![Vec::new(); attacks.len()],
        accuracy: Vec::new(),
        fpr: Vec::new(),
        models: Vec::new(),
        keys: Vec::new(),
    };

    for (id, key) in candidates {
        let mut model = baseline.clone();
        taboo_retrain(&mut model, train_ds, test_ds, &key, train_cfg)?;
        let clean = clean_metrics(&model, Some(&key), &eval_set.images, &eval_set.labels)?;
        report.accuracy.push(clean.a);
        report.fpr.push(clean.fpr);
        for (row, attack) in report.matrix.iter_mut().zip(attacks) {
            let cfg = attack.clone().with_seed(seed.wrapping_add(row.len() as u64));
            let batch = run_attack(&model, &eval_set.images, &eval_set.labels, &cfg)?;
            let m = evaluate(&model, Some(&key), (&eval_set.images, &eval_set.labels), &batch)?;
            row.push(m.d);
        }
        report.key_ids.push(id);
        report.models.push(model);
        report.keys.push(key);
    }
    Ok(report)
}
