//! Thin command-line front end over the library pipeline.
//!
//! Subcommands mirror the pipeline stages: `train`, `keygen`, `profile`,
//! `instrument`, `attack`, `evaluate`, `experiment`. Every subcommand also
//! reads a flat `key=value` config file via `--config`; explicit flags
//! override file values.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use taboo_trap::attack::{run_attack, AttackConfig, AttackMethod};
use taboo_trap::checkpoint::{
    load_batch, load_checkpoint, load_key, save_batch, save_checkpoint, save_key,
};
use taboo_trap::data::{Dataset, Split};
use taboo_trap::harness::{
    clean_metrics, evaluate, metrics_csv, run_experiment, spec_from_manifest, ExperimentSpec,
    KeySpec,
};
use taboo_trap::model::build_lenet5;
use taboo_trap::taboo::{key_f1, key_f2, key_f3, profile, KeyKind, TabooKey};
use taboo_trap::train::{taboo_retrain, train_baseline, TrainConfig};

#[derive(Parser)]
#[command(
    name = "taboo-trap",
    about = "Train activation-restricted convnets, attack them, and measure violation-based adversarial detection."
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the LeNet5 baseline on MNIST and save a checkpoint.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr0: Option<f32>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop early at this test accuracy.
        #[arg(long)]
        target_acc: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the per-epoch training log CSV here.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Construct a taboo key file (f1/f2/f3 or a custom percentile).
    Keygen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// f1, f2, f3, or p<percentile> (e.g. p5 = max 5th percentile).
        #[arg(long)]
        kind: Option<String>,
        /// Number of instrumentation points the key addresses.
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Profile a model on the training split and bind a percentile key.
    Profile {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Key file to bind; alternatively --percentile builds one fresh.
        #[arg(long)]
        key: Option<PathBuf>,
        #[arg(long)]
        percentile: Option<f32>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain a baseline under a key (the instrumented training process).
    Instrument {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Key id (f1/f2/f3/p<n>) or path to a key file.
        #[arg(long)]
        key: Option<String>,
        #[arg(long)]
        percentile: Option<f32>,
        #[arg(long)]
        lambda0: Option<f32>,
        #[arg(long)]
        lr0: Option<f32>,
        /// Retraining epoch cap.
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        target_fpr: Option<f64>,
        #[arg(long)]
        from_scratch: bool,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Generate adversarial samples against a checkpointed model.
    Attack {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// fgsm, pgd, or deepfool.
        #[arg(long)]
        attack: Option<String>,
        #[arg(long)]
        eps: Option<f32>,
        #[arg(long)]
        step: Option<f32>,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a model (and optional adversarial batch) into a metrics CSV.
    Evaluate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Key file; defaults to the key embedded in the checkpoint.
        #[arg(long)]
        key: Option<PathBuf>,
        /// Adversarial batch file produced by `attack`.
        #[arg(long)]
        adv: Option<PathBuf>,
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a declarative experiment (profile, bind, retrain, attack,
    /// evaluate) producing a CSV plus a rerunnable manifest.
    Experiment {
        /// Flat key=value spec (same schema the manifest uses).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Rerun an emitted manifest verbatim.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        data_dir: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Key id: none, embedded, f1, f2, f3, or p<percentile>.
        #[arg(long)]
        key: Option<String>,
        #[arg(long)]
        subset: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Metrics CSV path; the manifest lands next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Append one attack given by --attack/--eps/--step/--iters.
        #[arg(long)]
        attack: Option<String>,
        #[arg(long)]
        eps: Option<f32>,
        #[arg(long)]
        step: Option<f32>,
        #[arg(long)]
        iters: Option<usize>,
    },
}

/// Flat key=value config file; `#` comments and blank lines ignored.
fn read_config(path: Option<&Path>) -> Result<HashMap<String, String>> {
    let Some(path) = path else {
        return Ok(HashMap::new());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect())
}

fn pick<T: std::str::FromStr>(
    flag: Option<T>,
    cfg: &HashMap<String, String>,
    name: &str,
) -> Result<Option<T>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match cfg.get(name) {
        Some(v) => v
            .parse()
            .map(Some)
            .map_err(|_| anyhow::anyhow!("config field '{name}' is malformed: {v}")),
        None => Ok(None),
    }
}

fn need<T>(v: Option<T>, name: &str) -> Result<T> {
    v.with_context(|| format!("missing required option --{name} (or config key '{name}')"))
}

fn parse_attack_method(name: &str) -> Result<AttackMethod> {
    Ok(match name {
        "fgsm" => AttackMethod::Fgsm,
        "pgd" => AttackMethod::Pgd,
        "deepfool" => AttackMethod::DeepFool,
        other => bail!("unknown attack '{other}' (expected fgsm, pgd, deepfool)"),
    })
}

fn build_key_by_id(id: &str, layers: usize) -> Result<TabooKey> {
    Ok(match id {
        "f1" => key_f1(layers),
        "f2" => key_f2(),
        "f3" => key_f3(layers),
        other => {
            if let Some(p) = other.strip_prefix('p') {
                let percentile: f32 = p.parse().context("bad percentile in key id")?;
                TabooKey::from_parts(
                    (0..layers).collect(),
                    KeyKind::MaxPercentile {
                        percentile,
                        thresholds: None,
                    },
                )?
            } else {
                bail!("unknown key kind '{other}' (expected f1, f2, f3, p<n>)")
            }
        }
    })
}

fn main() -> Result<()> {
    match Cli::parse().cmd {
        Cmd::Train {
            config,
            data_dir,
            epochs,
            lr0,
            batch,
            seed,
            target_acc,
            out,
            log,
        } => {
            let cfg = read_config(config.as_deref())?;
            let data_dir: PathBuf = need(pick(data_dir, &cfg, "data_dir")?, "data-dir")?;
            let out: PathBuf = need(pick(out, &cfg, "out")?, "out")?;
            let train_ds = Dataset::load_dir(&data_dir, Split::Train)?;
            let test_ds = Dataset::load_dir(&data_dir, Split::Test)?;
            let defaults = TrainConfig::default();
            let tc = TrainConfig {
                epochs: pick(epochs, &cfg, "epochs")?.unwrap_or(defaults.epochs),
                lr: pick(lr0, &cfg, "lr0")?.unwrap_or(defaults.lr),
                batch_size: pick(batch, &cfg, "batch")?.unwrap_or(defaults.batch_size),
                seed: pick(seed, &cfg, "seed")?.unwrap_or(defaults.seed),
                target_accuracy: pick(target_acc, &cfg, "target_acc")?,
                ..defaults
            };
            let mut model = build_lenet5(tc.seed);
            let train_log = train_baseline(&mut model, &train_ds, &test_ds, &tc)?;
            save_checkpoint(&model, None, &out)?;
            if let Some(log_path) = pick::<PathBuf>(log, &cfg, "log")? {
                std::fs::write(&log_path, train_log.to_csv())?;
            }
            println!(
                "trained {} epochs, test accuracy {:.4}, checkpoint {}",
                train_log.records.len(),
                train_log.final_accuracy().unwrap_or(0.0),
                out.display()
            );
        }

        Cmd::Keygen {
            config,
            kind,
            layers,
            out,
        } => {
            let cfg = read_config(config.as_deref())?;
            let kind: String = need(pick(kind, &cfg, "kind")?, "kind")?;
            let layers = pick(layers, &cfg, "layers")?.unwrap_or(3);
            let out: PathBuf = need(pick(out, &cfg, "out")?, "out")?;
            let key = build_key_by_id(&kind, layers)?;
            save_key(&key, &out)?;
            println!(
                "wrote key '{kind}' over {layers} layers to {} (bound: {})",
                out.display(),
                key.is_bound()
            );
        }

        Cmd::Profile {
            config,
            data_dir,
            checkpoint,
            key,
            percentile,
            out,
        } => {
            let cfg = read_config(config.as_deref())?;
            let data_dir: PathBuf = need(pick(data_dir, &cfg, "data_dir")?, "data-dir")?;
            let checkpoint: PathBuf = need(pick(checkpoint, &cfg, "checkpoint")?, "checkpoint")?;
            let out: PathBuf = need(pick(out, &cfg, "out")?, "out")?;
            let (model, _) = load_checkpoint(&checkpoint)?;
            let mut key = match (
                pick::<PathBuf>(key, &cfg, "key")?,
                pick(percentile, &cfg, "percentile")?,
            ) {
                (Some(path), _) => load_key(&path)?,
                (None, Some(p)) => {
                    build_key_by_id(&format!("p{p}"), model.instrumentation_points())?
                }
                (None, None) => bail!("profile needs --key or --percentile"),
            };
            let train_ds = Dataset::load_dir(&data_dir, Split::Train)?;
            let prof = profile(&model, &train_ds.images)?;
            key.bind(&prof)?;
            save_key(&key, &out)?;
            println!("bound key written to {}", out.display());
        }

        Cmd::Instrument {
            config,
            data_dir,
            checkpoint,
            key,
            percentile,
            lambda0,
            lr0,
            epochs,
            target_fpr,
            from_scratch,
            seed,
            out,
            log,
        } => {
            let cfg = read_config(config.as_deref())?;
            let data_dir: PathBuf = need(pick(data_dir, &cfg, "data_dir")?, "data-dir")?;
            let checkpoint: PathBuf = need(pick(checkpoint, &cfg, "checkpoint")?, "checkpoint")?;
            let out: PathBuf = need(pick(out, &cfg, "out")?, "out")?;
            let train_ds = Dataset::load_dir(&data_dir, Split::Train)?;
            let test_ds = Dataset::load_dir(&data_dir, Split::Test)?;
            let (mut model, _) = load_checkpoint(&checkpoint)?;

            let key_arg = pick::<String>(key, &cfg, "key")?;
            let mut key = match (key_arg, pick(percentile, &cfg, "percentile")?) {
                (Some(id_or_path), _) => {
                    let as_path = PathBuf::from(&id_or_path);
                    if as_path.exists() {
                        load_key(&as_path)?
                    } else {
                        build_key_by_id(&id_or_path, model.instrumentation_points())?
                    }
                }
                (None, Some(p)) => {
                    build_key_by_id(&format!("p{p}"), model.instrumentation_points())?
                }
                (None, None) => bail!("instrument needs --key or --percentile"),
            };
            if !key.is_bound() {
                let prof = profile(&model, &train_ds.images)?;
                key.bind(&prof)?;
            }

            let baseline_acc = model.accuracy(&test_ds.images, &test_ds.labels)?;
            let defaults = TrainConfig::default();
            let tc = TrainConfig {
                lambda0: pick(lambda0, &cfg, "lambda0")?.unwrap_or(defaults.lambda0),
                lr: pick(lr0, &cfg, "lr0")?.unwrap_or(defaults.lr),
                max_retrain_epochs: pick(epochs, &cfg, "epochs")?
                    .unwrap_or(defaults.max_retrain_epochs),
                target_fpr: pick(target_fpr, &cfg, "target_fpr")?.unwrap_or(defaults.target_fpr),
                accuracy_floor: Some(baseline_acc - 0.005),
                from_scratch,
                seed: pick(seed, &cfg, "seed")?.unwrap_or(defaults.seed),
                ..defaults
            };
            let outcome = taboo_retrain(&mut model, &train_ds, &test_ds, &key, &tc)?;
            save_checkpoint(&model, Some(&key), &out)?;
            if let Some(log_path) = pick::<PathBuf>(log, &cfg, "log")? {
                std::fs::write(&log_path, outcome.log.to_csv())?;
            }
            let acc = model.accuracy(&test_ds.images, &test_ds.labels)?;
            println!(
                "instrumented in {} epochs (converged: {}), accuracy {:.4}, checkpoint {}",
                outcome.log.records.len(),
                outcome.converged,
                acc,
                out.display()
            );
        }

        Cmd::Attack {
            config,
            data_dir,
            checkpoint,
            attack,
            eps,
            step,
            iters,
            subset,
            seed,
            out,
        } => {
            let cfg = read_config(config.as_deref())?;
            let data_dir: PathBuf = need(pick(data_dir, &cfg, "data_dir")?, "data-dir")?;
            let checkpoint: PathBuf = need(pick(checkpoint, &cfg, "checkpoint")?, "checkpoint")?;
            let attack: String = need(pick(attack, &cfg, "attack")?, "attack")?;
            let out: PathBuf = need(pick(out, &cfg, "out")?, "out")?;
            let seed = pick(seed, &cfg, "seed")?.unwrap_or(42);
            let subset = pick(subset, &cfg, "subset")?.unwrap_or(1000);
            let method = parse_attack_method(&attack)?;
            let eps = pick(eps, &cfg, "eps")?;
            let iters = pick(iters, &cfg, "iters")?;
            let step = pick(step, &cfg, "step")?;
            let ac = match method {
                AttackMethod::Fgsm => AttackConfig::fgsm(need(eps, "eps")?),
                AttackMethod::Pgd => {
                    let eps = need(eps, "eps")?;
                    let iters = iters.unwrap_or(10);
                    AttackConfig::pgd_with(eps, step.unwrap_or(eps / 4.0), iters)
                }
                AttackMethod::DeepFool => AttackConfig::deepfool(iters.unwrap_or(5)),
            }
            .with_seed(seed);
            let (model, _) = load_checkpoint(&checkpoint)?;
            let test_ds = Dataset::load_dir(&data_dir, Split::Test)?;
            let eval_set = test_ds.subset(subset, seed);
            let batch = run_attack(&model, &eval_set.images, &eval_set.labels, &ac)?;
            save_batch(&batch, &out)?;
            let fooled = batch
                .adv_pred
                .iter()
                .zip(&batch.labels)
                .filter(|(p, l)| p != l)
                .count();
            println!(
                "{} {} over {} samples: {} now misclassified, batch {}",
                ac.method.name(),
                ac.theta(),
                eval_set.len(),
                fooled,
                out.display()
            );
        }

        Cmd::Evaluate {
            config,
            data_dir,
            checkpoint,
            key,
            adv,
            subset,
            seed,
            out,
        } => {
            let cfg = read_config(config.as_deref())?;
            let data_dir: PathBuf = need(pick(data_dir, &cfg, "data_dir")?, "data-dir")?;
            let checkpoint: PathBuf = need(pick(checkpoint, &cfg, "checkpoint")?, "checkpoint")?;
            let out: PathBuf = need(pick(out, &cfg, "out")?, "out")?;
            let seed = pick(seed, &cfg, "seed")?.unwrap_or(42);
            let subset = pick(subset, &cfg, "subset")?.unwrap_or(1000);
            let (model, embedded) = load_checkpoint(&checkpoint)?;
            let key = match pick::<PathBuf>(key, &cfg, "key")? {
                Some(path) => Some(load_key(&path)?),
                None => embedded,
            };
            let test_ds = Dataset::load_dir(&data_dir, Split::Test)?;
            let eval_set = test_ds.subset(subset, seed);
            let mut rows = vec![clean_metrics(
                &model,
                key.as_ref(),
                &eval_set.images,
                &eval_set.labels,
            )?];
            if let Some(batch_path) = pick::<PathBuf>(adv, &cfg, "adv")? {
                let batch = load_batch(&batch_path)?;
                rows.push(evaluate(
                    &model,
                    key.as_ref(),
                    (&eval_set.images, &eval_set.labels),
                    &batch,
                )?);
            }
            let csv = metrics_csv(&rows);
            std::fs::write(&out, &csv)?;
            print!("{csv}");
        }

        Cmd::Experiment {
            config,
            manifest,
            data_dir,
            checkpoint,
            key,
            subset,
            seed,
            out,
            attack,
            eps,
            step,
            iters,
        } => {
            let spec = if let Some(manifest_path) = manifest {
                spec_from_manifest(&std::fs::read_to_string(&manifest_path)?)?
            } else {
                let cfg = read_config(config.as_deref())?;
                let mut spec = match spec_from_manifest(
                    &cfg.iter()
                        .map(|(k, v)| format!("{k}={v}\n"))
                        .collect::<String>(),
                ) {
                    Ok(s) => s,
                    Err(_) => default_spec_from_cfg(&cfg)?,
                };
                if let Some(v) = data_dir {
                    spec.data_dir = v;
                }
                if let Some(v) = checkpoint {
                    spec.checkpoint = v;
                }
                if let Some(v) = key {
                    spec.key = KeySpec::parse(&v)?;
                }
                if let Some(v) = subset {
                    spec.subset = v;
                }
                if let Some(v) = seed {
                    spec.seed = v;
                }
                if let Some(v) = out {
                    spec.out_manifest = v.with_extension("manifest.txt");
                    spec.out_csv = v;
                }
                if let Some(method) = attack {
                    let method = parse_attack_method(&method)?;
                    let ac = match method {
                        AttackMethod::Fgsm => AttackConfig::fgsm(need(eps, "eps")?),
                        AttackMethod::Pgd => {
                            let eps = need(eps, "eps")?;
                            AttackConfig::pgd_with(
                                eps,
                                step.unwrap_or(eps / 4.0),
                                iters.unwrap_or(10),
                            )
                        }
                        AttackMethod::DeepFool => AttackConfig::deepfool(iters.unwrap_or(5)),
                    };
                    spec.attacks.push(ac);
                }
                spec
            };
            let report = run_experiment(&spec)?;
            print!("{}", report.csv);
            println!("# csv: {}", spec.out_csv.display());
            println!("# manifest: {}", spec.out_manifest.display());
        }
    }
    Ok(())
}

fn default_spec_from_cfg(cfg: &HashMap<String, String>) -> Result<ExperimentSpec> {
    let get_path = |k: &str| cfg.get(k).map(PathBuf::from);
    Ok(ExperimentSpec {
        data_dir: get_path("data_dir").unwrap_or_else(|| PathBuf::from("data/mnist")),
        checkpoint: get_path("checkpoint").unwrap_or_else(|| PathBuf::from("baseline.ttrp")),
        key: match cfg.get("key") {
            Some(v) => KeySpec::parse(v)?,
            None => KeySpec::Embedded,
        },
        train: TrainConfig::default(),
        attacks: Vec::new(),
        subset: cfg
            .get("subset")
            .map(|v| v.parse())
            .transpose()
            .context("bad subset")?
            .unwrap_or(1000),
        seed: cfg
            .get("seed")
            .map(|v| v.parse())
            .transpose()
            .context("bad seed")?
            .unwrap_or(42),
        out_csv: get_path("out_csv").unwrap_or_else(|| PathBuf::from("metrics.csv")),
        out_manifest: get_path("out_manifest")
            .unwrap_or_else(|| PathBuf::from("metrics.manifest.txt")),
        save_model: get_path("save_model"),
    })
}
