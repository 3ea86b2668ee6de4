//! Activation profiling, keyed taboo definitions, the differentiable
//! training penalty, and the inference-time violation detector.
//!
//! A key restricts where activations may live: either below a per-layer
//! threshold (the n-th percentile of profiled per-sample maxima) or inside a
//! union of closed intervals. Training penalizes the distance to the allowed
//! set, which is zero exactly when nothing violates; deployment only compares
//! activations against the stored bounds, adding no arithmetic beyond the
//! forward pass itself.
//!
//! Boundary convention: the detector fires at `a >= alpha` while the hinge
//! penalty is zero at `a == alpha`. The mismatch has measure zero; tests
//! probe strictly inside / strictly outside the boundary.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{interval_distance, ComputeGraph, NodeId};
use crate::model::Model;
use crate::tensor::Tensor;

/// Closed interval `[lo, hi]` of allowed activation values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f32,
    pub hi: f32,
}

/// Per-layer vectors of per-sample activation maxima, gathered over a
/// dataset: `per_layer[l][n] = max over X×Y×C of sample n's layer-l output`.
#[derive(Debug, Clone)]
pub struct ActivationProfile {
    pub per_layer: Vec<Vec<f32>>,
}

impl ActivationProfile {
    pub fn layers(&self) -> usize {
        self.per_layer.len()
    }

    pub fn samples(&self) -> usize {
        self.per_layer.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KeyKind {
    /// Allowed region `[0, alpha_l]` per selected layer, `alpha_l` resolved
    /// by binding the percentile against a profile.
    MaxPercentile {
        percentile: f32,
        thresholds: Option<Vec<f32>>,
    },
    /// Allowed region is a finite union of closed intervals per selected
    /// layer, sorted and non-overlapping.
    IntervalSet { intervals: Vec<Vec<Interval>> },
}

/// The secret defense parameterization: which instrumentation points are
/// watched and which activation values they tolerate.
#[derive(Debug, Clone, PartialEq)]
pub struct TabooKey {
    selector: Vec<usize>,
    kind: KeyKind,
}

impl TabooKey {
    pub fn from_parts(selector: Vec<usize>, kind: KeyKind) -> Result<Self> {
        if selector.is_empty() {
            return Err(Error::InvalidKey("selector must be non-empty".into()));
        }
        if selector.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidKey(
                "selector must be sorted and duplicate-free".into(),
            ));
        }
        match &kind {
            KeyKind::MaxPercentile { percentile, thresholds } => {
                if !(*percentile > 0.0 && *percentile <= 100.0) {
                    return Err(Error::PercentileOutOfRange(*percentile));
                }
                if let Some(t) = thresholds {
                    if t.len() != selector.len() {
                        return Err(Error::InvalidKey(
                            "threshold count does not match selector".into(),
                        ));
                    }
                    if t.iter().any(|&a| !(a > 0.0)) {
                        return Err(Error::InvalidKey("thresholds must be positive".into()));
                    }
                }
            }
            KeyKind::IntervalSet { intervals } => {
                if intervals.len() != selector.len() {
                    return Err(Error::InvalidKey(
                        "interval list count does not match selector".into(),
                    ));
                }
                for layer in intervals {
                    if layer.is_empty() {
                        return Err(Error::InvalidKey("empty interval list".into()));
                    }
                    for iv in layer {
                        if !(iv.lo <= iv.hi) {
                            return Err(Error::InvalidKey(format!(
                                "interval [{}, {}] is inverted",
                                iv.lo, iv.hi
                            )));
                        }
                    }
                    if layer.windows(2).any(|w| w[0].hi >= w[1].lo) {
                        return Err(Error::InvalidKey(
                            "intervals must be sorted and non-overlapping".into(),
                        ));
                    }
                }
            }
        }
        Ok(Self { selector, kind })
    }

    pub fn selector(&self) -> &[usize] {
        &self.selector
    }

    pub fn kind(&self) -> &KeyKind {
        &self.kind
    }

    /// Interval keys carry their bounds; percentile keys need binding first.
    pub fn is_bound(&self) -> bool {
        match &self.kind {
            KeyKind::MaxPercentile { thresholds, .. } => thresholds.is_some(),
            KeyKind::IntervalSet { .. } => true,
        }
    }

    /// Resolves percentile thresholds against a profile of the training
    /// split. Thresholds are stored with the key (and checkpoint) and never
    /// recomputed at inference.
    pub fn bind(&mut self, profile: &ActivationProfile) -> Result<()> {
        let KeyKind::MaxPercentile { percentile, thresholds } = &mut self.kind else {
            return Ok(());
        };
        let all = bind_thresholds(profile, *percentile)?;
        let mut resolved = Vec::with_capacity(self.selector.len());
        for &layer in &self.selector {
            let alpha = *all.get(layer).ok_or_else(|| {
                Error::InvalidKey(format!(
                    "selector layer {layer} outside profile ({} layers)",
                    all.len()
                ))
            })?;
            if !(alpha > 0.0) {
                return Err(Error::InvalidKey(format!(
                    "layer {layer} resolved a non-positive threshold {alpha}"
                )));
            }
            resolved.push(alpha);
        }
        *thresholds = Some(resolved);
        Ok(())
    }

    /// Attaches already-resolved thresholds (checkpoint reload path).
    pub fn attach_thresholds(&mut self, alphas: &[(usize, f32)]) -> Result<()> {
        let KeyKind::MaxPercentile { thresholds, .. } = &mut self.kind else {
            return Err(Error::InvalidKey(
                "thresholds only apply to percentile keys".into(),
            ));
        };
        let layers: Vec<usize> = alphas.iter().map(|&(l, _)| l).collect();
        if layers != self.selector {
            return Err(Error::InvalidKey(
                "threshold layers do not match selector".into(),
            ));
        }
        if alphas.iter().any(|&(_, a)| !(a > 0.0)) {
            return Err(Error::InvalidKey("thresholds must be positive".into()));
        }
        *thresholds = Some(alphas.iter().map(|&(_, a)| a).collect());
        Ok(())
    }

    fn bound_thresholds(&self) -> Result<&[f32]> {
        match &self.kind {
            KeyKind::MaxPercentile {
                thresholds: Some(t),
                ..
            } => Ok(t),
            KeyKind::MaxPercentile { thresholds: None, .. } => Err(Error::UnboundKey),
            KeyKind::IntervalSet { .. } => Err(Error::UnboundKey),
        }
    }
}

/// `f1`: maximum 1st percentile on every instrumentation point (unbound
/// until profiled).
pub fn key_f1(num_layers: usize) -> TabooKey {
    TabooKey::from_parts(
        (0..num_layers).collect(),
        KeyKind::MaxPercentile {
            percentile: 1.0,
            thresholds: None,
        },
    )
    .expect("valid construction")
}

/// `f2`: activations restricted to `[0, 1]`, first layer only. The zero edge
/// is allowed: post-ReLU units sit at exactly zero whenever they are
/// inactive, and taboo'ing zero would flag every input.
pub fn key_f2() -> TabooKey {
    TabooKey::from_parts(
        vec![0],
        KeyKind::IntervalSet {
            intervals: vec![vec![Interval { lo: 0.0, hi: 1.0 }]],
        },
    )
    .expect("valid construction")
}

/// `f3`: activations restricted to `[0,1] ∪ [2,3] ∪ [4,5]` on every layer.
pub fn key_f3(num_layers: usize) -> TabooKey {
    let intervals = vec![
        vec![
            Interval { lo: 0.0, hi: 1.0 },
            Interval { lo: 2.0, hi: 3.0 },
            Interval { lo: 4.0, hi: 5.0 },
        ];
        num_layers
    ];
    TabooKey::from_parts((0..num_layers).collect(), KeyKind::IntervalSet { intervals })
        .expect("valid construction")
}

/// Weight of the taboo penalty in the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlarmConfig {
    lambda: f32,
}

impl AlarmConfig {
    pub fn new(lambda: f32) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "alarm rate must be a finite nonnegative value, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f32 {
        self.lambda
    }
}

/// Per-sample maxima of one tap over a batch: tap `[B, ...]` → `B` scalars.
pub(crate) fn max_per_sample(tap: &Tensor) -> Vec<f32> {
    let batch = tap.shape()[0];
    let stride = tap.numel() / batch;
    tap.data()
        .chunks(stride)
        .map(|s| s.iter().copied().fold(f32::NEG_INFINITY, f32::max))
        .collect()
}

/// Records, for each sample and each instrumentation point, the maximum
/// activation over all spatial/channel positions. Order follows the dataset.
pub fn profile(model: &Model, images: &Tensor) -> Result<ActivationProfile> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(Error::EmptyDataset);
    }
    let layers = model.instrumentation_points();
    let stride: usize = images.shape()[1..].iter().product();
    let shape_rest = images.shape()[1..].to_vec();
    let chunk = 256usize;
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let chunks: Vec<Result<Vec<Vec<f32>>>> = starts
        .par_iter()
        .map(|&start| {
            let count = chunk.min(n - start);
            let mut shape = vec![count];
            shape.extend_from_slice(&shape_rest);
            let batch = Tensor::new(
                shape,
                images.data()[start * stride..(start + count) * stride].to_vec(),
            )?;
            let (_, taps) = model.forward(batch)?;
            Ok(taps.iter().map(max_per_sample).collect())
        })
        .collect();
    let mut per_layer = vec![Vec::with_capacity(n); layers];
    for c in chunks {
        let c = c?;
        for (l, maxima) in c.into_iter().enumerate() {
            per_layer[l].extend(maxima);
        }
    }
    Ok(ActivationProfile { per_layer })
}

/// Nearest-rank percentile of each layer's maxima vector:
/// `alpha = sorted[ceil(n/100 · N) − 1]`.
pub fn bind_thresholds(profile: &ActivationProfile, percentile: f32) -> Result<Vec<f32>> {
    if profile.per_layer.is_empty() || profile.per_layer.iter().any(Vec::is_empty) {
        return Err(Error::EmptyProfile);
    }
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::PercentileOutOfRange(percentile));
    }
    Ok(profile
        .per_layer
        .iter()
        .map(|maxima| {
            let mut sorted = maxima.clone();
            sorted.sort_by(f32::total_cmp);
            sorted[nearest_rank(percentile, sorted.len())]
        })
        .collect())
}

/// Zero-based index of the nearest-rank order statistic. The tiny guard
/// keeps `ceil` exact when `n·N/100` lands on an integer that floating-point
/// arithmetic overshoots (e.g. 70·10/100).
pub(crate) fn nearest_rank(percentile: f32, count: usize) -> usize {
    let pos = f64::from(percentile) * count as f64 / 100.0;
    let rank = (pos - 1e-9).ceil().max(1.0) as usize;
    rank.min(count) - 1
}

fn count_layer_violations(values: &[f32], key: &TabooKey, sel_idx: usize) -> Result<u64> {
    match &key.kind {
        KeyKind::MaxPercentile { .. } => {
            let alpha = key.bound_thresholds()?[sel_idx];
            Ok(values.iter().filter(|&&a| a >= alpha).count() as u64)
        }
        KeyKind::IntervalSet { intervals } => {
            let allowed = &intervals[sel_idx];
            Ok(values
                .iter()
                .filter(|&&a| !allowed.iter().any(|iv| a >= iv.lo && a <= iv.hi))
                .count() as u64)
        }
    }
}

/// Number of taboo'd activation positions in one sample's activations.
/// `acts` holds every instrumentation point in forward order; the key picks
/// the layers it watches. Percentile keys fire at `a >= alpha`.
pub fn violation_count(key: &TabooKey, acts: &[Tensor]) -> Result<u64> {
    if !key.is_bound() {
        return Err(Error::UnboundKey);
    }
    let mut total = 0u64;
    for (sel_idx, &layer) in key.selector.iter().enumerate() {
        let tap = acts.get(layer).ok_or_else(|| {
            Error::InvalidKey(format!("selector layer {layer} missing from activations"))
        })?;
        total += count_layer_violations(tap.data(), key, sel_idx)?;
    }
    Ok(total)
}

/// Differentiable training surrogate: summed distance of every watched
/// activation to its allowed set. Zero exactly when nothing violates (the
/// boundary point contributes zero while still counting as a violation).
pub fn penalty_value(key: &TabooKey, acts: &[Tensor]) -> Result<f64> {
    if !key.is_bound() {
        return Err(Error::UnboundKey);
    }
    let mut total = 0.0f64;
    for (sel_idx, &layer) in key.selector.iter().enumerate() {
        let tap = acts.get(layer).ok_or_else(|| {
            Error::InvalidKey(format!("selector layer {layer} missing from activations"))
        })?;
        match &key.kind {
            KeyKind::MaxPercentile { .. } => {
                let alpha = key.bound_thresholds()?[sel_idx];
                total += tap
                    .data()
                    .iter()
                    .map(|&a| f64::from((a - alpha).max(0.0)))
                    .sum::<f64>();
            }
            KeyKind::IntervalSet { intervals } => {
                let allowed: Vec<(f32, f32)> =
                    intervals[sel_idx].iter().map(|iv| (iv.lo, iv.hi)).collect();
                total += tap
                    .data()
                    .iter()
                    .map(|&a| f64::from(interval_distance(a, &allowed).0))
                    .sum::<f64>();
            }
        }
    }
    Ok(total)
}

/// Graph node computing the taboo penalty over the batch (hinge mass above
/// thresholds, or distance to the allowed intervals), summed across the
/// selected taps.
pub fn taboo_penalty_node(
    g: &mut ComputeGraph,
    taps: &[NodeId],
    key: &TabooKey,
) -> Result<NodeId> {
    if !key.is_bound() {
        return Err(Error::UnboundKey);
    }
    let mut acc: Option<NodeId> = None;
    for (sel_idx, &layer) in key.selector.iter().enumerate() {
        let tap = *taps.get(layer).ok_or_else(|| {
            Error::InvalidKey(format!("selector layer {layer} missing from forward taps"))
        })?;
        let term = match &key.kind {
            KeyKind::MaxPercentile { .. } => {
                let alpha = key.bound_thresholds()?[sel_idx];
                g.hinge_above_sum(tap, alpha)
            }
            KeyKind::IntervalSet { intervals } => {
                let allowed: Vec<(f32, f32)> =
                    intervals[sel_idx].iter().map(|iv| (iv.lo, iv.hi)).collect();
                g.interval_dist_sum(tap, &allowed)
            }
        };
        acc = Some(match acc {
            None => term,
            Some(prev) => g.add(prev, term)?,
        });
    }
    Ok(acc.expect("selector is non-empty"))
}

/// Combined training loss: `cross_entropy + lambda · Σ_batch penalty`.
/// The alarm rate is applied exactly once.
pub fn combined_loss_node(
    g: &mut ComputeGraph,
    taps: &[NodeId],
    logits: NodeId,
    labels: &[usize],
    key: Option<&TabooKey>,
    alarm: AlarmConfig,
) -> Result<NodeId> {
    let ce = g.softmax_cross_entropy(logits, labels)?;
    let Some(key) = key else { return Ok(ce) };
    if alarm.lambda() == 0.0 {
        return Ok(ce);
    }
    let penalty = taboo_penalty_node(g, taps, key)?;
    let weighted = g.scale(penalty, alarm.lambda());
    g.add(ce, weighted)
}

/// One sample's verdict and per-watched-layer violation counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleDetection {
    pub verdict: bool,
    pub per_layer: Vec<u64>,
    pub total: u64,
}

/// Detection outcome for a batch: `verdict == true ⇔ total > 0`.
#[derive(Debug, Clone, Default)]
pub struct DetectionReport {
    pub samples: Vec<SampleDetection>,
}

impl DetectionReport {
    pub fn detected(&self) -> usize {
        self.samples.iter().filter(|s| s.verdict).count()
    }

    pub fn detection_rate(&self) -> f64 {
        if self.samples.is_empty() {
            0.0
        } else {
            self.detected() as f64 / self.samples.len() as f64
        }
    }
}

/// Runs the model once and checks every watched activation against the key.
/// No arithmetic happens beyond the model's own forward pass — only value
/// comparisons against the stored bounds.
pub fn detect(model: &Model, input: &Tensor, key: &TabooKey) -> Result<DetectionReport> {
    if !key.is_bound() {
        return Err(Error::UnboundKey);
    }
    if input.shape()[1..] != model.input_shape[..] {
        return Err(Error::ShapeMismatch {
            context: "detect",
            expected: format!("[N, {:?}]", model.input_shape),
            actual: format!("{:?}", input.shape()),
        });
    }
    let batch = input.shape()[0];
    let (_, taps) = model.forward(input.clone())?;
    let mut samples = Vec::with_capacity(batch);
    for n in 0..batch {
        let mut per_layer = Vec::with_capacity(key.selector.len());
        let mut total = 0u64;
        for (sel_idx, &layer) in key.selector.iter().enumerate() {
            let tap = &taps[layer];
            let stride = tap.numel() / batch;
            let slice = &tap.data()[n * stride..(n + 1) * stride];
            let count = count_layer_violations(slice, key, sel_idx)?;
            per_layer.push(count);
            total += count;
        }
        samples.push(SampleDetection {
            verdict: total > 0,
            per_layer,
            total,
        });
    }
    Ok(DetectionReport { samples })
}

/// Per-sample verdicts over a (possibly large) image set, evaluated in
/// deterministic chunks across threads.
pub fn detect_flags(model: &Model, images: &Tensor, key: &TabooKey) -> Result<Vec<bool>> {
    let n = images.shape()[0];
    let stride: usize = images.shape()[1..].iter().product();
    let shape_rest = images.shape()[1..].to_vec();
    let chunk = 256usize;
    let starts: Vec<usize> = (0..n).step_by(chunk).collect();
    let parts: Vec<Result<Vec<bool>>> = starts
        .par_iter()
        .map(|&start| {
            let count = chunk.min(n - start);
            let mut shape = vec![count];
            shape.extend_from_slice(&shape_rest);
            let batch = Tensor::new(
                shape,
                images.data()[start * stride..(start + count) * stride].to_vec(),
            )?;
            Ok(detect(model, &batch, key)?
                .samples
                .iter()
                .map(|s| s.verdict)
                .collect())
        })
        .collect();
    let mut flags = Vec::with_capacity(n);
    for p in parts {
        flags.extend(p?);
    }
    Ok(flags)
}

/// Fraction of samples flagged over an image set.
pub fn detection_rate(model: &Model, images: &Tensor, key: &TabooKey) -> Result<f64> {
    let flags = detect_flags(model, images, key)?;
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}
