//! Baseline SGD training and the taboo-instrumented retraining loop.
//!
//! Retraining minimizes `cross_entropy + lambda · penalty` and adapts the
//! two knobs the way the instrumented process prescribes: whenever the loss
//! plateaus, the alarm rate goes up and the learning rate comes down, until
//! the clean-data detection rate falls to the configured target (or the
//! epoch cap trips). Thresholds are bound once, from a profile of the
//! original network on the training split, and stay fixed throughout.

use crate::data::{batches, BatchPlan, Dataset};
use crate::error::{Error, Result};
use crate::graph::{sgd_step, ComputeGraph};
use crate::model::Model;
use crate::taboo::{combined_loss_node, detection_rate, AlarmConfig, TabooKey};
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    /// Baseline epoch budget.
    pub epochs: usize,
    pub batch_size: usize,
    /// Initial learning rate (the schedule only ever decreases it).
    pub lr: f32,
    pub momentum: f32,
    /// Initial alarm rate (the schedule only ever increases it).
    pub lambda0: f32,
    pub lambda_growth: f32,
    pub lr_decay: f32,
    /// Epochs without a >=0.1% relative loss improvement before the
    /// schedule reacts.
    pub plateau_window: usize,
    pub max_retrain_epochs: usize,
    /// Clean-data detection rate at which retraining may stop.
    pub target_fpr: f64,
    /// Clean accuracy a retrain epoch must keep to be an acceptable
    /// candidate (typically baseline accuracy minus half a point).
    pub accuracy_floor: Option<f64>,
    /// Baseline early stop once test accuracy reaches this.
    pub target_accuracy: Option<f64>,
    /// Reinitialize parameters instead of fine-tuning the given model.
    pub from_scratch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            lambda0: 1e-3,
            lambda_growth: 2.0,
            lr_decay: 0.5,
            plateau_window: 3,
            max_retrain_epochs: 60,
            target_fpr: 0.01,
            accuracy_floor: None,
            target_accuracy: None,
            from_scratch: false,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_growth <= 1.0 {
            return Err(Error::InvalidConfig("lambda growth factor must exceed 1".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::InvalidConfig("lr decay factor must lie in (0,1)".into()));
        }
        if self.plateau_window == 0 {
            return Err(Error::InvalidConfig("plateau window must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::BatchSizeZero);
        }
        AlarmConfig::new(self.lambda0)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Clean-data detection rate; 0 when no key is installed.
    pub fpr: f64,
    pub lambda: f32,
    pub lr: f32,
}

/// One record per completed epoch.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,acc,fpr,lambda,lr\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.6},{:.6},{:.6},{:.6e},{:.6e}\n",
                r.epoch, r.loss, r.accuracy, r.fpr, r.lambda, r.lr
            ));
        }
        out
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.accuracy)
    }
}

/// Loss-plateau tracker: reports `true` when the best loss has failed to
/// improve by at least 0.1% relative over a full window.
#[derive(Debug, Clone)]
pub struct PlateauSchedule {
    window: usize,
    best: f64,
    stale: usize,
}

impl PlateauSchedule {
    pub fn new(window: usize) -> Self {
        Self {
            window,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best * (1.0 - 1e-3) {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.window {
            self.stale = 0;
            true
        } else {
            false
        }
    }
}

/// Outcome of the instrumented retraining loop.
pub struct RetrainOutcome {
    pub log: TrainLog,
    /// Set when the clean detection-rate target was met by the returned
    /// model; `false` means best-effort (epoch cap hit first).
    pub converged: bool,
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// One pass over the training split; returns the sample-weighted mean loss.
fn run_epoch(
    model: &mut Model,
    train: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
    key: Option<&TabooKey>,
    lambda: f32,
    lr: f32,
    velocity: &mut [Tensor],
) -> Result<f64> {
    let plan = BatchPlan::new(train.len(), cfg.batch_size, epoch_seed(cfg.seed, epoch))?;
    let alarm = AlarmConfig::new(lambda)?;
    let mut loss_sum = 0.0f64;
    for (images, labels) in batches(train, &plan) {
        let batch = labels.len();
        let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        let mut g = ComputeGraph::new();
        let pass = model.forward_graph(&mut g, images, false, true)?;
        let loss = combined_loss_node(&mut g, &pass.taps, pass.logits, &labels, key, alarm)?;
        let loss_value = f64::from(g.value(loss).item());
        if !loss_value.is_finite() {
            return Err(Error::Divergence { epoch });
        }
        loss_sum += loss_value * batch as f64;
        let grads = g.backward(loss)?;
        let grad_refs: Vec<&Tensor> = pass.param_ids.iter().map(|&id| grads.expect(id)).collect();
        sgd_step(&mut model.params, velocity, &grad_refs, lr, cfg.momentum)?;
    }
    Ok(loss_sum / train.len() as f64)
}

fn zero_velocity(model: &Model) -> Vec<Tensor> {
    model.params.iter().map(|p| Tensor::zeros(p.shape())).collect()
}

/// Plain SGD on cross-entropy. Per-epoch test accuracy lands in the log;
/// stops early once `target_accuracy` is reached.
pub fn train_baseline(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    cfg.validate()?;
    let mut velocity = zero_velocity(model);
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let loss = run_epoch(model, train, cfg, epoch, None, 0.0, cfg.lr, &mut velocity)?;
        let accuracy = model.accuracy(&test.images, &test.labels)?;
        log.records.push(EpochRecord {
            epoch,
            loss,
            accuracy,
            fpr: 0.0,
            lambda: 0.0,
            lr: cfg.lr,
        });
        if cfg.target_accuracy.is_some_and(|t| accuracy >= t) {
            break;
        }
    }
    Ok(log)
}

/// The instrumented retraining loop. Epochs of SGD on the combined loss;
/// each plateau bumps `lambda` up and the learning rate down; terminates as
/// soon as the clean detection rate reaches the target while accuracy stays
/// acceptable, or when the epoch cap elapses, returning the
/// lowest-detection-rate parameters among accuracy-acceptable epochs.
pub fn taboo_retrain(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    key: &TabooKey,
    cfg: &TrainConfig,
) -> Result<RetrainOutcome> {
    cfg.validate()?;
    if !key.is_bound() {
        return Err(Error::UnboundKey);
    }
    if cfg.from_scratch {
        let fresh = Model::new(
            model.layers.clone(),
            model.input_shape.clone(),
            cfg.seed.wrapping_add(0x5ca1e),
        );
        model.params = fresh.params;
    }

    let acc_ok = |acc: f64| cfg.accuracy_floor.is_none_or(|floor| acc >= floor);

    // Loop guard: a model already violation-free on clean data needs zero
    // parameter updates.
    let fpr0 = detection_rate(model, &test.images, key)?;
    if fpr0 <= cfg.target_fpr {
        let acc0 = model.accuracy(&test.images, &test.labels)?;
        if acc_ok(acc0) {
            return Ok(RetrainOutcome {
                log: TrainLog::default(),
                converged: true,
            });
        }
    }

    let mut velocity = zero_velocity(model);
    let mut log = TrainLog::default();
    let mut lambda = cfg.lambda0;
    let mut lr = cfg.lr;
    let mut plateau = PlateauSchedule::new(cfg.plateau_window);
    // best acceptable epoch so far: (fpr, params); fallback: highest accuracy
    let mut best_acceptable: Option<(f64, Vec<Tensor>)> = None;
    let mut best_fallback: Option<(f64, Vec<Tensor>)> = None;
    let mut converged = false;

    for epoch in 1..=cfg.max_retrain_epochs {
        let loss = run_epoch(model, train, cfg, epoch, Some(key), lambda, lr, &mut velocity)?;
        let accuracy = model.accuracy(&test.images, &test.labels)?;
        let fpr = detection_rate(model, &test.images, key)?;
        log.records.push(EpochRecord {
            epoch,
            loss,
            accuracy,
            fpr,
            lambda,
            lr,
        });

        if acc_ok(accuracy) {
            if best_acceptable.as_ref().is_none_or(|(f, _)| fpr < *f) {
                best_acceptable = Some((fpr, model.params.clone()));
            }
            if fpr <= cfg.target_fpr {
                converged = true;
                break;
            }
        } else if best_fallback.as_ref().is_none_or(|(a, _)| accuracy > *a) {
            best_fallback = Some((accuracy, model.params.clone()));
        }

        if plateau.observe(loss) {
            lambda *= cfg.lambda_growth;
            lr *= cfg.lr_decay;
        }
    }

    if let Some((_, params)) = best_acceptable {
        model.params = params;
    } else if let Some((_, params)) = best_fallback {
        model.params = params;
    }
    Ok(RetrainOutcome { log, converged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Split;
    use crate::model::Layer;
    use crate::taboo::{KeyKind, TabooKey};
    use rand::{Rng, SeedableRng};

    fn tiny_model(seed: u64) -> Model {
        Model::new(
            vec![
                Layer::Conv2d {
                    in_ch: 1,
                    out_ch: 2,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
                Layer::MaxPool2d { kernel: 2, stride: 2 },
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear { in_f: 18, out_f: 4 },
            ],
            vec![1, 8, 8],
            seed,
        )
    }

    fn tiny_dataset(n: usize, seed: u64) -> Dataset {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * 64).map(|_| rng.gen_range(0.0..1.0)).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..4)).collect();
        Dataset::new(Tensor::new(vec![n, 8, 8], data).unwrap(), labels, Split::Train).unwrap()
    }

    fn bound_key(alpha: f32) -> TabooKey {
        let mut key = TabooKey::from_parts(
            vec![0],
            KeyKind::MaxPercentile {
                percentile: 1.0,
                thresholds: None,
            },
        )
        .unwrap();
        key.attach_thresholds(&[(0, alpha)]).unwrap();
        key
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let mut model = tiny_model(1);
        let before = model.params.clone();
        let ds = tiny_dataset(32, 2);
        let init_acc = model.accuracy(&ds.images, &ds.labels).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr: 0.0,
            momentum: 0.0,
            seed: 3,
            ..TrainConfig::default()
        };
        let log = train_baseline(&mut model, &ds, &ds, &cfg).unwrap();
        assert_eq!(model.params, before);
        assert_eq!(log.records.len(), 1);
        assert_eq!(log.records[0].accuracy, init_acc);
    }

    #[test]
    fn loss_decreases_on_learnable_data() {
        let mut model = tiny_model(4);
        let ds = tiny_dataset(64, 5);
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 16,
            lr: 0.05,
            seed: 6,
            ..TrainConfig::default()
        };
        let log = train_baseline(&mut model, &ds, &ds, &cfg).unwrap();
        let first = log.records.first().unwrap().loss;
        let last = log.records.last().unwrap().loss;
        assert!(last < first, "loss should decrease: {first} -> {last}");
    }

    #[test]
    fn repeat_runs_are_reproducible() {
        let run = || {
            let mut model = tiny_model(20);
            let ds = tiny_dataset(48, 21);
            let cfg = TrainConfig {
                epochs: 3,
                batch_size: 16,
                lr: 0.05,
                seed: 22,
                ..TrainConfig::default()
            };
            let log = train_baseline(&mut model, &ds, &ds, &cfg).unwrap();
            (log.records.last().unwrap().loss, model.params)
        };
        let (loss_a, params_a) = run();
        let (loss_b, params_b) = run();
        assert_eq!(loss_a.to_bits(), loss_b.to_bits());
        assert_eq!(params_a, params_b);
    }

    #[test]
    fn divergence_is_detected() {
        let mut model = tiny_model(7);
        let ds = tiny_dataset(32, 8);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 8,
            lr: 1e30,
            momentum: 0.0,
            seed: 9,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_baseline(&mut model, &ds, &ds, &cfg),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn plateau_schedule_mechanics() {
        let mut sched = PlateauSchedule::new(3);
        // improving: never fires
        assert!(!sched.observe(1.0));
        assert!(!sched.observe(0.9));
        assert!(!sched.observe(0.8));
        // constant loss: fires at each full window
        assert!(!sched.observe(0.8));
        assert!(!sched.observe(0.8));
        assert!(sched.observe(0.8));
        assert!(!sched.observe(0.8));
        assert!(!sched.observe(0.8));
        assert!(sched.observe(0.8));
    }

    #[test]
    fn synthetic_plateau_bumps_lambda_and_decays_lr() {
        let mut model = tiny_model(10);
        let ds = tiny_dataset(48, 11);
        // threshold low enough that violations persist; lr small enough that
        // the loss is effectively constant, so every window plateaus
        let key = bound_key(1e-4);
        let lr0 = 1e-12f32;
        let cfg = TrainConfig {
            batch_size: 16,
            lr: lr0,
            lambda0: 1e-3,
            plateau_window: 2,
            max_retrain_epochs: 7,
            target_fpr: 0.0,
            seed: 12,
            ..TrainConfig::default()
        };
        let out = taboo_retrain(&mut model, &ds, &ds, &key, &cfg).unwrap();
        assert!(!out.converged);
        let lambdas: Vec<f32> = out.log.records.iter().map(|r| r.lambda).collect();
        let lrs: Vec<f32> = out.log.records.iter().map(|r| r.lr).collect();
        // epoch 1 sets the best loss; windows of 2 then bump after 3, 5, 7
        assert_eq!(
            lambdas,
            vec![1e-3, 1e-3, 1e-3, 2e-3, 2e-3, 4e-3, 4e-3]
        );
        assert_eq!(
            lrs,
            vec![lr0, lr0, lr0, lr0 * 0.5, lr0 * 0.5, lr0 * 0.25, lr0 * 0.25]
        );
        // at every window boundary lambda strictly rises and lr strictly falls
        for boundary in [3usize, 5] {
            assert!(lambdas[boundary] > lambdas[boundary - 1]);
            assert!(lrs[boundary] < lrs[boundary - 1]);
        }
        // schedule monotonicity across the whole run
        assert!(lambdas.windows(2).all(|w| w[0] <= w[1]));
        assert!(lrs.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn already_clean_model_terminates_without_updates() {
        let mut model = tiny_model(13);
        let before = model.params.clone();
        let ds = tiny_dataset(32, 14);
        let key = bound_key(1e9); // nothing can violate
        let cfg = TrainConfig {
            batch_size: 8,
            seed: 15,
            ..TrainConfig::default()
        };
        let out = taboo_retrain(&mut model, &ds, &ds, &key, &cfg).unwrap();
        assert!(out.converged);
        assert!(out.log.records.is_empty());
        assert_eq!(model.params, before);
    }

    #[test]
    fn retrain_requires_bound_key() {
        let mut model = tiny_model(16);
        let ds = tiny_dataset(16, 17);
        let unbound = TabooKey::from_parts(
            vec![0],
            KeyKind::MaxPercentile {
                percentile: 1.0,
                thresholds: None,
            },
        )
        .unwrap();
        assert!(matches!(
            taboo_retrain(&mut model, &ds, &ds, &unbound, &TrainConfig::default()),
            Err(Error::UnboundKey)
        ));
    }

    #[test]
    fn config_validation() {
        let bad_growth = TrainConfig {
            lambda_growth: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad_growth.validate().is_err());
        let bad_decay = TrainConfig {
            lr_decay: 1.0,
            ..TrainConfig::default()
        };
        assert!(bad_decay.validate().is_err());
        let bad_window = TrainConfig {
            plateau_window: 0,
            ..TrainConfig::default()
        };
        assert!(bad_window.validate().is_err());
    }

    #[test]
    fn log_csv_layout() {
        let log = TrainLog {
            records: vec![EpochRecord {
                epoch: 1,
                loss: 0.5,
                accuracy: 0.75,
                fpr: 0.01,
                lambda: 1e-3,
                lr: 0.01,
            }],
        };
        let csv = log.to_csv();
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,loss,acc,fpr,lambda,lr");
        assert!(lines.next().unwrap().starts_with("1,0.500000,0.750000,0.010000,"));
    }
}
