//! Adversarial sample generation: FGSM, PGD, and DeepFool.
//!
//! All three are white-box with respect to the weights (gradients come from
//! the autodiff graph with the image node flagged) and blind with respect to
//! the taboo key. Pixel values stay inside `[0,1]`; FGSM and PGD also
//! respect an L∞ budget around the original image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::ComputeGraph;
use crate::model::{argmax_rows, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackMethod {
    Fgsm,
    Pgd,
    DeepFool,
}

impl AttackMethod {
    pub fn name(&self) -> &'static str {
        match self {
            AttackMethod::Fgsm => "fgsm",
            AttackMethod::Pgd => "pgd",
            AttackMethod::DeepFool => "deepfool",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackConfig {
    pub method: AttackMethod,
    /// L∞ budget on the `[0,1]` pixel scale (FGSM/PGD).
    pub eps: f32,
    /// PGD step size.
    pub step: f32,
    /// Iteration count (PGD/DeepFool).
    pub iters: usize,
    /// DeepFool overshoot applied to the accumulated perturbation.
    pub overshoot: f32,
    /// PGD random start inside the budget ball.
    pub random_start: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(eps: f32) -> Self {
        Self {
            method: AttackMethod::Fgsm,
            eps,
            step: 0.0,
            iters: 1,
            overshoot: 0.0,
            random_start: false,
            seed: 0,
        }
    }

    /// PGD with the default schedule: step `eps/4`, 10 iterations.
    pub fn pgd(eps: f32) -> Self {
        Self::pgd_with(eps, eps / 4.0, 10)
    }

    pub fn pgd_with(eps: f32, step: f32, iters: usize) -> Self {
        Self {
            method: AttackMethod::Pgd,
            eps,
            step,
            iters,
            overshoot: 0.0,
            random_start: true,
            seed: 0,
        }
    }

    pub fn deepfool(iters: usize) -> Self {
        Self {
            method: AttackMethod::DeepFool,
            eps: 0.0,
            step: 0.0,
            iters,
            overshoot: 0.02,
            random_start: false,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.eps < 0.0 {
            return Err(Error::InvalidConfig("attack eps must be nonnegative".into()));
        }
        if self.iters == 0 {
            return Err(Error::InvalidConfig("attack iteration count must be >= 1".into()));
        }
        if self.method == AttackMethod::Pgd && self.step <= 0.0 {
            return Err(Error::InvalidConfig("pgd step must be positive".into()));
        }
        Ok(())
    }

    /// Parameter column for report tables, e.g. `eps=0.1` or `i=5`.
    pub fn theta(&self) -> String {
        match self.method {
            AttackMethod::Fgsm => format!("eps={}", self.eps),
            AttackMethod::Pgd => format!("eps={} i={}", self.eps, self.iters),
            AttackMethod::DeepFool => format!("i={}", self.iters),
        }
    }
}

/// Attack output with everything evaluation needs: both image sets, labels,
/// predictions on both, per-sample L∞ distances, and per-sample flags for
/// degenerate cases (attack returned the input unchanged).
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub config: AttackConfig,
    pub originals: Tensor,
    pub perturbed: Tensor,
    pub labels: Vec<u8>,
    pub clean_pred: Vec<u8>,
    pub adv_pred: Vec<u8>,
    pub linf: Vec<f32>,
    pub degenerate: Vec<bool>,
}

fn sign_exact(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clip01(data: &mut [f32]) {
    for v in data {
        *v = v.clamp(0.0, 1.0);
    }
}

/// Gradient of the batch cross-entropy w.r.t. the input images.
pub fn input_gradient(model: &Model, images: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let labels: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
    let mut g = ComputeGraph::new();
    let pass = model.forward_graph(&mut g, images.clone(), true, false)?;
    let loss = g.softmax_cross_entropy(pass.logits, &labels)?;
    let grads = g.backward(loss)?;
    Ok(grads.expect(pass.input).clone())
}

/// Single-step sign attack: `x' = clip(x + eps · sign(∇_x L))`.
pub fn fgsm(model: &Model, images: &Tensor, labels: &[u8], eps: f32) -> Result<Tensor> {
    if eps < 0.0 {
        return Err(Error::InvalidConfig("fgsm eps must be nonnegative".into()));
    }
    let grad = input_gradient(model, images, labels)?;
    let mut out = images.clone();
    for (x, &g) in out.data_mut().iter_mut().zip(grad.data()) {
        *x += eps * sign_exact(g);
    }
    clip01(out.data_mut());
    Ok(out)
}

/// Iterated projected sign steps inside the `eps` ball, optionally from a
/// seeded random start.
pub fn pgd(model: &Model, images: &Tensor, labels: &[u8], cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    let mut x = images.clone();
    if cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        for v in x.data_mut() {
            *v += rng.gen_range(-cfg.eps..=cfg.eps);
        }
        clip01(x.data_mut());
    }
    for _ in 0..cfg.iters {
        let grad = input_gradient(model, &x, labels)?;
        for ((xv, &gv), &x0) in x.data_mut().iter_mut().zip(grad.data()).zip(images.data()) {
            let stepped = *xv + cfg.step * sign_exact(gv);
            // project onto the L∞ ball around the original, then the pixel box
            *xv = stepped
                .clamp(x0 - cfg.eps, x0 + cfg.eps)
                .clamp(0.0, 1.0);
        }
    }
    Ok(x)
}

/// Gradients of every class logit w.r.t. a single input, in one backward
/// pass: the sample is replicated K times and a diagonal gather pulls one
/// logit per copy.
fn logit_gradients(model: &Model, x: &Tensor, classes: usize) -> Result<(Vec<f32>, Tensor)> {
    let mut replicated_shape = x.shape().to_vec();
    replicated_shape[0] = classes;
    let mut data = Vec::with_capacity(x.numel() * classes);
    for _ in 0..classes {
        data.extend_from_slice(x.data());
    }
    let replicated = Tensor::new(replicated_shape, data)?;
    let mut g = ComputeGraph::new();
    let pass = model.forward_graph(&mut g, replicated, true, false)?;
    let picks: Vec<(usize, usize)> = (0..classes).map(|k| (k, k)).collect();
    let gathered = g.gather_sum(pass.logits, &picks)?;
    let logits_row = g.value(pass.logits).data()[..classes].to_vec();
    let grads = g.backward(gathered)?;
    Ok((logits_row, grads.expect(pass.input).clone()))
}

/// Multiclass DeepFool on one sample (shape `[1, ...]`): per iteration,
/// linearize all class margins, take the minimal-L2 step to the nearest
/// decision boundary, stop when the predicted label flips. The accumulated
/// perturbation is scaled by `1 + overshoot` and boxed to `[0,1]`.
///
/// `skip_if_label`: when the model already misclassifies the input relative
/// to this label, the attack returns it unchanged, flagged degenerate (a
/// boundary has already been crossed). A zero-gradient first iteration also
/// returns unchanged with the flag.
pub fn deepfool(
    model: &Model,
    x: &Tensor,
    skip_if_label: Option<u8>,
    cfg: &AttackConfig,
) -> Result<(Tensor, bool)> {
    cfg.validate()?;
    let (logits, _) = model.forward(x.clone())?;
    let classes = logits.shape()[1];
    let pred0 = argmax_rows(&logits)[0] as usize;
    if let Some(y) = skip_if_label {
        if pred0 != y as usize {
            return Ok((x.clone(), true));
        }
    }

    let numel = x.numel();
    let overshoot = 1.0 + cfg.overshoot;
    // iterate inside the pixel box. Margin steps are projected onto the
    // subspace of pixels that can still move in the step's direction
    // (saturated pixels would silently absorb their share of every step and
    // stall the walk against the box faces), and renormalized there, so each
    // iteration realizes its full linearized margin progress.
    let mut current = x.clone();
    for iter in 0..cfg.iters {
        let (f, grads) = logit_gradients(model, &current, classes)?;
        let pred: usize = {
            let mut best = 0;
            for k in 1..classes {
                if f[k] > f[best] {
                    best = k;
                }
            }
            best
        };
        if pred != pred0 {
            break; // boundary crossed
        }
        // free-subspace norm of w = grad_k − grad_0: zero out coordinates
        // pinned against the bound they would push past
        let free_norm_sq = |w_iter: &mut dyn Iterator<Item = f32>| -> f64 {
            let mut total = 0.0f64;
            for (w, &xv) in w_iter.zip(current.data()) {
                let blocked = (w > 0.0 && xv >= 1.0) || (w < 0.0 && xv <= 0.0);
                if !blocked {
                    total += f64::from(w) * f64::from(w);
                }
            }
            total
        };
        let g0 = &grads.data()[pred0 * numel..(pred0 + 1) * numel];
        let mut best: Option<(f64, usize, f64)> = None;
        for k in 0..classes {
            if k == pred0 {
                continue;
            }
            let gk = &grads.data()[k * numel..(k + 1) * numel];
            let norm_sq = free_norm_sq(&mut gk.iter().zip(g0).map(|(a, b)| a - b));
            if norm_sq == 0.0 {
                continue;
            }
            let margin = f64::from(f[k] - f[pred0]).abs();
            let ratio = margin / norm_sq.sqrt();
            if best.is_none_or(|(r, _, _)| ratio < r) {
                best = Some((ratio, k, norm_sq));
            }
        }
        let Some((_, l_star, norm_sq)) = best else {
            // no feasible margin direction remains
            if iter == 0 {
                return Ok((x.clone(), true));
            }
            break;
        };
        let gl = &grads.data()[l_star * numel..(l_star + 1) * numel];
        let margin = f64::from(f[l_star] - f[pred0]).abs() + 1e-6;
        let scale = overshoot * (margin / norm_sq) as f32;
        for (v, (a, b)) in current.data_mut().iter_mut().zip(gl.iter().zip(g0)) {
            let w = a - b;
            let blocked = (w > 0.0 && *v >= 1.0) || (w < 0.0 && *v <= 0.0);
            if !blocked {
                *v += scale * w;
            }
        }
        clip01(current.data_mut());
    }

    Ok((current, false))
}

/// Runs the configured attack over a full image set and packages the result.
pub fn run_attack(
    model: &Model,
    images: &Tensor,
    labels: &[u8],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let n = images.shape()[0];
    if n != labels.len() {
        return Err(Error::ShapeMismatch {
            context: "run_attack",
            expected: format!("{n} labels"),
            actual: format!("{}", labels.len()),
        });
    }
    let clean_pred = model.predict(images)?;
    let stride: usize = images.shape()[1..].iter().product();

    let (perturbed, degenerate) = match cfg.method {
        AttackMethod::Fgsm | AttackMethod::Pgd => {
            let chunk = 256usize;
            let starts: Vec<usize> = (0..n).step_by(chunk).collect();
            let shape_rest = images.shape()[1..].to_vec();
            let parts: Vec<Result<Tensor>> = starts
                .iter()
                .map(|&start| {
                    let count = chunk.min(n - start);
                    let mut shape = vec![count];
                    shape.extend_from_slice(&shape_rest);
                    let part = Tensor::new(
                        shape,
                        images.data()[start * stride..(start + count) * stride].to_vec(),
                    )?;
                    let part_labels = &labels[start..start + count];
                    match cfg.method {
                        AttackMethod::Fgsm => fgsm(model, &part, part_labels, cfg.eps),
                        AttackMethod::Pgd => {
                            // derive the chunk's noise seed from the sample
                            // offset so results do not depend on chunking
                            let chunk_cfg = AttackConfig {
                                seed: cfg.seed.wrapping_add(start as u64),
                                ..cfg.clone()
                            };
                            pgd(model, &part, part_labels, &chunk_cfg)
                        }
                        AttackMethod::DeepFool => unreachable!(),
                    }
                })
                .collect();
            let mut all = Vec::with_capacity(n * stride);
            for p in parts {
                all.extend_from_slice(p?.data());
            }
            (
                Tensor::new(images.shape().to_vec(), all)?,
                vec![false; n],
            )
        }
        AttackMethod::DeepFool => {
            let results: Vec<Result<(Tensor, bool)>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let sample = images.slice_first_axis(i);
                    deepfool(model, &sample, Some(labels[i]), cfg)
                })
                .collect();
            let mut parts = Vec::with_capacity(n);
            let mut degenerate = Vec::with_capacity(n);
            for r in results {
                let (t, d) = r?;
                parts.push(t);
                degenerate.push(d);
            }
            (Tensor::stack_first_axis(&parts)?, degenerate)
        }
    };

    let adv_pred = model.predict(&perturbed)?;
    let linf: Vec<f32> = (0..n)
        .map(|i| {
            images.data()[i * stride..(i + 1) * stride]
                .iter()
                .zip(&perturbed.data()[i * stride..(i + 1) * stride])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max)
        })
        .collect();

    // budget and box invariants hold by construction; verify anyway
    if matches!(cfg.method, AttackMethod::Fgsm | AttackMethod::Pgd) {
        if let Some(worst) = linf.iter().copied().fold(None::<f32>, |m, v| {
            Some(m.map_or(v, |m| m.max(v)))
        }) {
            if worst > cfg.eps + 1e-6 {
                return Err(Error::InvalidConfig(format!(
                    "attack exceeded its L-inf budget: {worst} > {}",
                    cfg.eps
                )));
            }
        }
    }
    if perturbed.data().iter().any(|&v| !(0.0..=1.0).contains(&v)) {
        return Err(Error::InvalidConfig("perturbed pixels left [0,1]".into()));
    }

    Ok(AdversarialBatch {
        config: cfg.clone(),
        originals: images.clone(),
        perturbed,
        labels: labels.to_vec(),
        clean_pred,
        adv_pred,
        linf,
        degenerate,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Layer;
    use rand::Rng;

    fn small_conv_model(seed: u64) -> Model {
        Model::new(
            vec![
                Layer::Conv2d {
                    in_ch: 1,
                    out_ch: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 0,
                },
                Layer::MaxPool2d { kernel: 2, stride: 2 },
                Layer::Relu,
                Layer::Flatten,
                Layer::Linear { in_f: 36, out_f: 4 },
            ],
            vec![1, 8, 8],
            seed,
        )
    }

    fn random_images(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..n * 64).map(|_| rng.gen_range(0.3..0.7)).collect();
        Tensor::new(vec![n, 1, 8, 8], data).unwrap()
    }

    #[test]
    fn fgsm_zero_eps_is_identity() {
        let m = small_conv_model(1);
        let x = random_images(4, 2);
        let labels = vec![0, 1, 2, 3];
        let out = fgsm(&m, &x, &labels, 0.0).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn fgsm_steps_are_signed_eps() {
        let m = small_conv_model(3);
        // interior pixels: no clipping interferes
        let x = random_images(4, 4);
        let labels = vec![0, 1, 2, 3];
        let eps = 0.05;
        let out = fgsm(&m, &x, &labels, eps).unwrap();
        for (a, b) in x.data().iter().zip(out.data()) {
            let d = b - a;
            assert!(
                (d - eps).abs() < 1e-6 || (d + eps).abs() < 1e-6 || d == 0.0,
                "step {d} not in {{-eps, 0, eps}}"
            );
        }
    }

    #[test]
    fn pgd_one_step_from_origin_equals_fgsm() {
        let m = small_conv_model(5);
        let x = random_images(3, 6);
        let labels = vec![1, 2, 0];
        let eps = 0.08;
        let cfg = AttackConfig {
            random_start: false,
            ..AttackConfig::pgd_with(eps, eps, 1)
        };
        let a = pgd(&m, &x, &labels, &cfg).unwrap();
        let b = fgsm(&m, &x, &labels, eps).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn pgd_respects_budget_and_box() {
        let m = small_conv_model(7);
        let x = random_images(5, 8);
        let labels = vec![0, 1, 2, 3, 0];
        for eps in [0.07f32, 0.5, 1.0] {
            let cfg = AttackConfig::pgd(eps).with_seed(9);
            let out = run_attack(&m, &x, &labels, &cfg).unwrap();
            for &d in &out.linf {
                assert!(d <= eps + 1e-6, "linf {d} exceeds eps {eps}");
            }
            assert!(out
                .perturbed
                .data()
                .iter()
                .all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn pgd_is_seed_deterministic() {
        let m = small_conv_model(10);
        let x = random_images(4, 11);
        let labels = vec![0, 1, 2, 3];
        let cfg = AttackConfig::pgd(0.1).with_seed(77);
        let a = run_attack(&m, &x, &labels, &cfg).unwrap();
        let b = run_attack(&m, &x, &labels, &cfg).unwrap();
        assert_eq!(a.perturbed.data(), b.perturbed.data());
        let c = run_attack(&m, &x, &labels, &cfg.clone().with_seed(78)).unwrap();
        assert_ne!(a.perturbed.data(), c.perturbed.data());
    }

    /// On a linear two-class model the one-step perturbation length equals
    /// the exact point-to-hyperplane distance.
    #[test]
    fn deepfool_matches_hyperplane_distance() {
        let mut m = Model::new(
            vec![Layer::Linear { in_f: 2, out_f: 2 }],
            vec![2],
            0,
        );
        // f0 = 1.0·x0 + 0.2·x1, f1 = 0.1·x0 + 0.9·x1 (+ biases)
        let w = [1.0f32, 0.2, 0.1, 0.9];
        let b = [0.05f32, -0.02];
        m.params[0].data_mut().copy_from_slice(&w);
        m.params[1].data_mut().copy_from_slice(&b);

        let x = Tensor::new(vec![1, 2], vec![0.8, 0.3]).unwrap();
        let (logits, _) = m.forward(x.clone()).unwrap();
        assert_eq!(argmax_rows(&logits), vec![0]);

        let cfg = AttackConfig {
            overshoot: 0.0,
            ..AttackConfig::deepfool(1)
        };
        let (adv, degenerate) = deepfool(&m, &x, None, &cfg).unwrap();
        assert!(!degenerate);
        let moved: f32 = x
            .data()
            .iter()
            .zip(adv.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f32>()
            .sqrt();
        // closed form: |f1 - f0| / ||w1 - w0||
        let f0 = w[0] * 0.8 + w[1] * 0.3 + b[0];
        let f1 = w[2] * 0.8 + w[3] * 0.3 + b[1];
        let dw = [(w[2] - w[0]), (w[3] - w[1])];
        let expected = (f1 - f0).abs() / (dw[0] * dw[0] + dw[1] * dw[1]).sqrt();
        assert!(
            (moved - expected).abs() / expected < 1e-3,
            "moved {moved}, expected {expected}"
        );
    }

    #[test]
    fn deepfool_skips_already_misclassified() {
        let m = small_conv_model(13);
        let x = random_images(1, 14);
        let pred = m.predict(&x).unwrap()[0];
        let wrong_label = (pred + 1) % 4;
        let (out, degenerate) = deepfool(&m, &x, Some(wrong_label), &AttackConfig::deepfool(5)).unwrap();
        assert!(degenerate);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn deepfool_zero_gradient_degenerates() {
        let mut m = small_conv_model(15);
        for p in &mut m.params {
            p.data_mut().fill(0.0);
        }
        let x = random_images(1, 16);
        let (out, degenerate) = deepfool(&m, &x, None, &AttackConfig::deepfool(3)).unwrap();
        assert!(degenerate);
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn deepfool_flips_labels_within_the_pixel_box() {
        // a linear head keeps decision boundaries within clipping reach;
        // random conv stacks can demand perturbations larger than the box
        let m = Model::new(
            vec![Layer::Flatten, Layer::Linear { in_f: 64, out_f: 4 }],
            vec![1, 8, 8],
            17,
        );
        let x = random_images(8, 18);
        let labels = m.predict(&x).unwrap(); // use own predictions as truth
        let cfg = AttackConfig::deepfool(10);
        let out = run_attack(&m, &x, &labels, &cfg).unwrap();
        let flipped = out
            .adv_pred
            .iter()
            .zip(&out.clean_pred)
            .filter(|(a, c)| a != c)
            .count();
        assert!(flipped >= 6, "deepfool flipped only {flipped}/8");
        assert!(out
            .perturbed
            .data()
            .iter()
            .all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(AttackConfig::fgsm(-0.1).validate().is_err());
        assert!(AttackConfig::pgd_with(0.1, 0.0, 5).validate().is_err());
        assert!(AttackConfig::deepfool(0).validate().is_err());
    }

    #[test]
    fn theta_strings() {
        assert_eq!(AttackConfig::fgsm(0.1).theta(), "eps=0.1");
        assert_eq!(AttackConfig::pgd_with(0.07, 0.0175, 5).theta(), "eps=0.07 i=5");
        assert_eq!(AttackConfig::deepfool(5).theta(), "i=5");
    }
}
