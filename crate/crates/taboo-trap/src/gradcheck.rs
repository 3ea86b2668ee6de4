//! Finite-difference gradient checking.
//!
//! The numerical side only re-runs forward passes, so it stays independent
//! of the reverse-mode code paths it is used to verify.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{ComputeGraph, NodeId};
use crate::tensor::Tensor;

/// Step size for central differences on 32-bit values.
pub const FD_STEP: f32 = 1e-3;

/// Relative-error tolerance for analytic vs. numerical gradients.
pub const FD_TOLERANCE: f64 = 1e-3;

/// Central differences on 32-bit forwards carry absolute noise of roughly
/// `|loss| · eps_f32 / (2h)` ≈ `|loss| · 3e-5`; the checker cushions the
/// comparison by this amount (with margin) so coordinates whose gradients
/// sit below the measurement floor do not produce spurious mismatches.
pub const FD_NOISE_PER_LOSS: f64 = 1e-4;

/// Builds a graph over leaves made from `inputs` and returns the scalar loss
/// node. The leaf ids arrive in input order.
pub type BuildFn<'a> = &'a dyn Fn(&mut ComputeGraph, &[NodeId]) -> NodeId;

/// Central finite difference of the loss w.r.t. one input coordinate.
pub fn numerical_grad(build: BuildFn, inputs: &[Tensor], input_idx: usize, coord: usize) -> f64 {
    let eval = |delta: f32| -> f64 {
        let mut perturbed: Vec<Tensor> = inputs.to_vec();
        perturbed[input_idx].data_mut()[coord] += delta;
        let mut g = ComputeGraph::new();
        let ids: Vec<NodeId> = perturbed.into_iter().map(|t| g.leaf(t, false)).collect();
        let loss = build(&mut g, &ids);
        f64::from(g.value(loss).item())
    };
    (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * f64::from(FD_STEP))
}

/// Compares reverse-mode gradients against central differences at `probes`
/// randomly chosen coordinates: pass iff
/// `|analytic − numerical| ≤ 1e-3 · max(|analytic|, |numerical|) + noise`
/// where `noise` is the 32-bit finite-difference floor for this loss.
/// Returns the worst relative error among resolvable coordinates, or an
/// error string naming the first failing coordinate.
pub fn check_gradients(
    build: BuildFn,
    inputs: &[Tensor],
    probes: usize,
    seed: u64,
) -> Result<f64, String> {
    let mut g = ComputeGraph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let loss = build(&mut g, &ids);
    let loss_magnitude = f64::from(g.value(loss).item().abs()).max(1.0);
    let noise = loss_magnitude * FD_NOISE_PER_LOSS;
    let grads = g
        .backward(loss)
        .map_err(|e| format!("backward failed: {e}"))?;

    let mut coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |c| (i, c)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    coords.shuffle(&mut rng);
    coords.truncate(probes);

    let mut worst = 0.0f64;
    for (input_idx, coord) in coords {
        let analytic = f64::from(grads.expect(ids[input_idx]).data()[coord]);
        let numerical = numerical_grad(build, inputs, input_idx, coord);
        let scale = analytic.abs().max(numerical.abs());
        let diff = (analytic - numerical).abs();
        if diff > FD_TOLERANCE * scale + noise {
            return Err(format!(
                "gradient mismatch at input {input_idx} coord {coord}: analytic {analytic:.6e}, numerical {numerical:.6e}, rel {:.3e}",
                diff / scale
            ));
        }
        if scale > noise * 10.0 {
            worst = worst.max(diff / scale);
        }
    }
    Ok(worst)
}

/// Random data for gradient probing, nudged away from the kinks of
/// piecewise-linear ops (relu at 0, hinge at the threshold) so central
/// differences stay valid.
pub fn kink_free_data(len: usize, seed: u64, margin: f32) -> Vec<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len)
        .map(|_| {
            let v: f32 = rng.gen_range(-1.0..1.0);
            if v.abs() < margin {
                if v >= 0.0 {
                    v + margin
                } else {
                    v - margin
                }
            } else {
                v
            }
        })
        .collect()
}
