//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Forward values are computed eagerly as ops are appended, so the tape is
//! always in topological order and a single reverse sweep yields gradients
//! for every flagged leaf (parameters and, for attack generation, inputs).
//! Values are immutable once written; a graph instance is confined to one
//! thread for a forward/backward pass, but distinct instances can run in
//! parallel.
//!
//! Convolutions go through explicit patch-matrix expansion (im2col) and a
//! single-threaded GEMM, which keeps every reduction order fixed: results
//! are bit-identical regardless of how many worker threads the caller uses.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub usize);

/// Recorded operation with whatever forward state its backward needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
        /// im2col patches, `[n][oy*Wo+ox][ci*k*k]`, saved for the weight and
        /// input gradients.
        patches: Vec<f32>,
    },
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu {
        input: NodeId,
    },
    MaxPool2d {
        input: NodeId,
        /// Flat index into the input buffer of each window's (first) maximum.
        argmax: Vec<u32>,
    },
    Flatten {
        input: NodeId,
    },
    Neg {
        input: NodeId,
    },
    Add {
        lhs: NodeId,
        rhs: NodeId,
    },
    Scale {
        input: NodeId,
        factor: f32,
    },
    SumAll {
        input: NodeId,
    },
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
    },
    /// `Σ max(0, x - threshold)`: hinge mass above a taboo threshold.
    HingeAboveSum {
        input: NodeId,
        threshold: f32,
    },
    /// `Σ distance(x, allowed)` where `allowed` is a union of closed
    /// intervals, sorted and non-overlapping.
    IntervalDistSum {
        input: NodeId,
        intervals: Vec<(f32, f32)>,
    },
    /// `Σ input[row, col]` over the given picks; gradient scatters back.
    GatherSum {
        input: NodeId,
        picks: Vec<(usize, usize)>,
    },
}

struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Gradients keyed by node id, shapes matching each node's forward value.
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a node known to require one.
    pub fn expect(&self, id: NodeId) -> &Tensor {
        self.get(id).expect("node does not carry a gradient")
    }
}

#[derive(Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        id
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    /// Inserts an external value. `requires_grad` flags it for the backward
    /// sweep (trainable parameter or attacked input).
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(Op::Leaf, value, requires_grad)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// Cross-correlation: input `[N,Ci,H,W]`, weight `[Co,Ci,k,k]`, bias `[Co]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        let (xs, ws) = (x.shape(), w.shape());
        if xs.len() != 4 || ws.len() != 4 || ws[2] != ws[3] {
            return Err(Error::ShapeMismatch {
                context: "conv2d",
                expected: "input [N,Ci,H,W], weight [Co,Ci,k,k]".into(),
                actual: format!("input {:?}, weight {:?}", xs, ws),
            });
        }
        let (n, ci, h, w_in) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[0], ws[2]);
        if ws[1] != ci {
            return Err(Error::ShapeMismatch {
                context: "conv2d channels",
                expected: format!("weight C_in = {}", ci),
                actual: format!("weight C_in = {}", ws[1]),
            });
        }
        if b.shape() != [co] {
            return Err(Error::ShapeMismatch {
                context: "conv2d bias",
                expected: format!("[{}]", co),
                actual: format!("{:?}", b.shape()),
            });
        }
        if stride == 0 {
            return Err(Error::InvalidConfig("conv2d stride must be positive".into()));
        }
        if k > h + 2 * padding || k > w_in + 2 * padding {
            return Err(Error::ShapeMismatch {
                context: "conv2d kernel",
                expected: format!("k <= padded extent ({}, {})", h + 2 * padding, w_in + 2 * padding),
                actual: format!("k = {}", k),
            });
        }
        let (ho, wo) = (
            conv_extent("conv2d", h, k, stride, padding)?,
            conv_extent("conv2d", w_in, k, stride, padding)?,
        );

        let kk = ci * k * k;
        let positions = ho * wo;
        let mut patches = vec![0.0f32; n * positions * kk];
        let x_data = x.data();
        let im_stride = ci * h * w_in;
        patches
            .par_chunks_mut(positions * kk)
            .zip(x_data.par_chunks(im_stride))
            .for_each(|(p_n, x_n)| {
                im2col(x_n, ci, h, w_in, k, stride, padding, ho, wo, p_n);
            });

        let w_data = w.data().to_vec();
        let b_data = b.data().to_vec();
        let mut out = vec![0.0f32; n * co * positions];
        out.par_chunks_mut(co * positions)
            .zip(patches.par_chunks(positions * kk))
            .for_each(|(out_n, p_n)| {
                // out_n [Co, Ho*Wo] = Wmat [Co, kk] · P_nᵀ
                gemm(
                    co,
                    kk,
                    positions,
                    &w_data,
                    kk as isize,
                    1,
                    p_n,
                    1,
                    kk as isize,
                    out_n,
                    0.0,
                );
                for (c, row) in out_n.chunks_mut(positions).enumerate() {
                    let bc = b_data[c];
                    for v in row {
                        *v += bc;
                    }
                }
            });

        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::new(vec![n, co, ho, wo], out)?;
        Ok(self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                patches,
            },
            value,
            needs,
        ))
    }

    /// Affine map: input `[N,F_in]`, weight `[F_out,F_in]`, bias `[F_out]`.
    pub fn linear(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let x = self.value(input);
        let w = self.value(weight);
        let b = self.value(bias);
        if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                context: "linear",
                expected: "input [N,F_in], weight [F_out,F_in]".into(),
                actual: format!("input {:?}, weight {:?}", x.shape(), w.shape()),
            });
        }
        let (n, f_in) = (x.shape()[0], x.shape()[1]);
        let f_out = w.shape()[0];
        if b.shape() != [f_out] {
            return Err(Error::ShapeMismatch {
                context: "linear bias",
                expected: format!("[{}]", f_out),
                actual: format!("{:?}", b.shape()),
            });
        }
        let mut out = vec![0.0f32; n * f_out];
        // out = X · Wᵀ
        gemm(
            n,
            f_in,
            f_out,
            x.data(),
            f_in as isize,
            1,
            w.data(),
            1,
            f_in as isize,
            &mut out,
            0.0,
        );
        for row in out.chunks_mut(f_out) {
            for (v, bj) in row.iter_mut().zip(b.data()) {
                *v += bj;
            }
        }
        let needs = self.needs(input) || self.needs(weight) || self.needs(bias);
        let value = Tensor::new(vec![n, f_out], out)?;
        Ok(self.push(Op::Linear { input, weight, bias }, value, needs))
    }

    /// Elementwise `max(0, x)`; backward passes gradient only where `x > 0`.
    pub fn relu(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let data = x.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(Op::Relu { input }, value, needs)
    }

    /// Windowed maximum over `[N,C,H,W]`; H and W must tile into full windows.
    pub fn maxpool2d(&mut self, input: NodeId, k: usize, stride: usize) -> Result<NodeId> {
        let x = self.value(input);
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(Error::ShapeMismatch {
                context: "maxpool2d",
                expected: "[N,C,H,W]".into(),
                actual: format!("{:?}", xs),
            });
        }
        if stride == 0 || k == 0 {
            return Err(Error::InvalidConfig("maxpool2d k and stride must be positive".into()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if h < k || w < k {
            return Err(Error::NonIntegerOutput {
                op: "maxpool2d",
                numerator: h.min(w),
                stride,
            });
        }
        let ho = pool_extent(h, k, stride)?;
        let wo = pool_extent(w, k, stride)?;
        let x_data = x.data();
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut argmax = vec![0u32; n * c * ho * wo];
        for nn in 0..n {
            for cc in 0..c {
                let plane = (nn * c + cc) * h * w;
                let out_plane = (nn * c + cc) * ho * wo;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for ky in 0..k {
                            let row = plane + (oy * stride + ky) * w + ox * stride;
                            for kx in 0..k {
                                let v = x_data[row + kx];
                                // strict '>' keeps the first (row-major) max on ties
                                if v > best {
                                    best = v;
                                    best_idx = row + kx;
                                }
                            }
                        }
                        out[out_plane + oy * wo + ox] = best;
                        argmax[out_plane + oy * wo + ox] = best_idx as u32;
                    }
                }
            }
        }
        let needs = self.needs(input);
        let value = Tensor::new(vec![n, c, ho, wo], out)?;
        Ok(self.push(Op::MaxPool2d { input, argmax }, value, needs))
    }

    /// `[N, ...]` → `[N, prod(rest)]`.
    pub fn flatten(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let n = x.shape()[0];
        let rest: usize = x.shape()[1..].iter().product();
        let value = Tensor::new(vec![n, rest], x.data().to_vec()).expect("same numel");
        let needs = self.needs(input);
        self.push(Op::Flatten { input }, value, needs)
    }

    pub fn neg(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let data = x.data().iter().map(|v| -v).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(Op::Neg { input }, value, needs)
    }

    /// Elementwise sum of two same-shaped nodes.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId> {
        let (a, b) = (self.value(lhs), self.value(rhs));
        if a.shape() != b.shape() {
            return Err(Error::ShapeMismatch {
                context: "add",
                expected: format!("{:?}", a.shape()),
                actual: format!("{:?}", b.shape()),
            });
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::new(a.shape().to_vec(), data)?;
        let needs = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(Op::Add { lhs, rhs }, value, needs))
    }

    pub fn scale(&mut self, input: NodeId, factor: f32) -> NodeId {
        let x = self.value(input);
        let data = x.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(x.shape().to_vec(), data).expect("same shape");
        let needs = self.needs(input);
        self.push(Op::Scale { input, factor }, value, needs)
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum_all(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let total: f64 = x.data().iter().map(|&v| f64::from(v)).sum();
        let needs = self.needs(input);
        self.push(Op::SumAll { input }, Tensor::scalar(total as f32), needs)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, max-stabilized.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.shape().len() != 2 || z.shape()[0] != labels.len() {
            return Err(Error::ShapeMismatch {
                context: "softmax_cross_entropy",
                expected: format!("logits [N={},K]", labels.len()),
                actual: format!("{:?}", z.shape()),
            });
        }
        let classes = z.shape()[1];
        for &l in labels {
            if l >= classes {
                return Err(Error::LabelOutOfRange { label: l, classes });
            }
        }
        // 64-bit only in the reduction accumulator
        let mut total = 0.0f64;
        for (row, &label) in z.data().chunks(classes).zip(labels) {
            total += f64::from(row_cross_entropy(row, label));
        }
        let value = Tensor::scalar((total / labels.len() as f64) as f32);
        let needs = self.needs(logits);
        Ok(self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
            },
            value,
            needs,
        ))
    }

    /// `Σ max(0, x - threshold)` over every element.
    pub fn hinge_above_sum(&mut self, input: NodeId, threshold: f32) -> NodeId {
        let x = self.value(input);
        let total: f64 = x
            .data()
            .iter()
            .map(|&v| f64::from((v - threshold).max(0.0)))
            .sum();
        let needs = self.needs(input);
        self.push(
            Op::HingeAboveSum { input, threshold },
            Tensor::scalar(total as f32),
            needs,
        )
    }

    /// `Σ distance(x, ∪ intervals)` over every element. Intervals must be
    /// sorted and non-overlapping; distance is zero inside any interval.
    pub fn interval_dist_sum(&mut self, input: NodeId, intervals: &[(f32, f32)]) -> NodeId {
        let x = self.value(input);
        let total: f64 = x
            .data()
            .iter()
            .map(|&v| f64::from(interval_distance(v, intervals).0))
            .sum();
        let needs = self.needs(input);
        self.push(
            Op::IntervalDistSum {
                input,
                intervals: intervals.to_vec(),
            },
            Tensor::scalar(total as f32),
            needs,
        )
    }

    /// `Σ input[row, col]` over `picks`; used to pull per-class logits out in
    /// one backward pass.
    pub fn gather_sum(&mut self, input: NodeId, picks: &[(usize, usize)]) -> Result<NodeId> {
        let x = self.value(input);
        if x.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                context: "gather_sum",
                expected: "[N,K]".into(),
                actual: format!("{:?}", x.shape()),
            });
        }
        let (n, k) = (x.shape()[0], x.shape()[1]);
        let mut total = 0.0f64;
        for &(r, c) in picks {
            if r >= n || c >= k {
                return Err(Error::ShapeMismatch {
                    context: "gather_sum pick",
                    expected: format!("(row < {}, col < {})", n, k),
                    actual: format!("({}, {})", r, c),
                });
            }
            total += f64::from(x.data()[r * k + c]);
        }
        let needs = self.needs(input);
        Ok(self.push(
            Op::GatherSum {
                input,
                picks: picks.to_vec(),
            },
            Tensor::scalar(total as f32),
            needs,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Single reverse sweep from a scalar loss. Every grad-requiring node
    /// gets a gradient tensor; nodes not contributing to the loss keep zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let loss_value = self.value(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = self
            .nodes
            .iter()
            .map(|node| {
                if node.needs_grad {
                    Some(Tensor::zeros(node.value.shape()))
                } else {
                    None
                }
            })
            .collect();
        if grads[loss.0].is_none() {
            // loss depends on no flagged leaf; still seed it so the map is valid
            grads[loss.0] = Some(Tensor::zeros(loss_value.shape()));
        }
        grads[loss.0].as_mut().unwrap().data_mut()[0] = 1.0;

        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            let g = grads[id].take().unwrap();
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn propagate(&self, id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                stride,
                padding,
                patches,
            } => {
                self.conv2d_backward(*input, *weight, *bias, *stride, *padding, patches, g, grads);
            }
            Op::Linear { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (n, f_in) = (x.shape()[0], x.shape()[1]);
                let f_out = w.shape()[0];
                if let Some(dx) = &mut grads[input.0] {
                    // dX += dOut · W
                    gemm(
                        n,
                        f_out,
                        f_in,
                        g.data(),
                        f_out as isize,
                        1,
                        w.data(),
                        f_in as isize,
                        1,
                        dx.data_mut(),
                        1.0,
                    );
                }
                if let Some(dw) = &mut grads[weight.0] {
                    // dW += dOutᵀ · X
                    gemm(
                        f_out,
                        n,
                        f_in,
                        g.data(),
                        1,
                        f_out as isize,
                        x.data(),
                        f_in as isize,
                        1,
                        dw.data_mut(),
                        1.0,
                    );
                }
                if let Some(db) = &mut grads[bias.0] {
                    let db = db.data_mut();
                    for row in g.data().chunks(f_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                }
            }
            Op::Relu { input } => {
                if let Some(dx) = &mut grads[input.0] {
                    let x = self.value(*input);
                    for ((d, &xv), &gv) in dx.data_mut().iter_mut().zip(x.data()).zip(g.data()) {
                        if xv > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::MaxPool2d { input, argmax } => {
                if let Some(dx) = &mut grads[input.0] {
                    let dx = dx.data_mut();
                    for (&idx, &gv) in argmax.iter().zip(g.data()) {
                        dx[idx as usize] += gv;
                    }
                }
            }
            Op::Flatten { input } => {
                if let Some(dx) = &mut grads[input.0] {
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv;
                    }
                }
            }
            Op::Neg { input } => {
                if let Some(dx) = &mut grads[input.0] {
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d -= gv;
                    }
                }
            }
            Op::Add { lhs, rhs } => {
                for side in [lhs, rhs] {
                    if let Some(d) = &mut grads[side.0] {
                        for (dv, &gv) in d.data_mut().iter_mut().zip(g.data()) {
                            *dv += gv;
                        }
                    }
                }
            }
            Op::Scale { input, factor } => {
                if let Some(dx) = &mut grads[input.0] {
                    for (d, &gv) in dx.data_mut().iter_mut().zip(g.data()) {
                        *d += gv * factor;
                    }
                }
            }
            Op::SumAll { input } => {
                if let Some(dx) = &mut grads[input.0] {
                    let gv = g.item();
                    for d in dx.data_mut() {
                        *d += gv;
                    }
                }
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                if let Some(dz) = &mut grads[logits.0] {
                    let z = self.value(*logits);
                    let classes = z.shape()[1];
                    let scale = g.item() / labels.len() as f32;
                    let dz = dz.data_mut();
                    for (i, (row, &label)) in z.data().chunks(classes).zip(labels).enumerate() {
                        let probs = row_softmax(row);
                        let out = &mut dz[i * classes..(i + 1) * classes];
                        for (c, (d, p)) in out.iter_mut().zip(probs).enumerate() {
                            let target = if c == label { 1.0 } else { 0.0 };
                            *d += scale * (p - target);
                        }
                    }
                }
            }
            Op::HingeAboveSum { input, threshold } => {
                if let Some(dx) = &mut grads[input.0] {
                    let x = self.value(*input);
                    let gv = g.item();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        if xv > *threshold {
                            *d += gv;
                        }
                    }
                }
            }
            Op::IntervalDistSum { input, intervals } => {
                if let Some(dx) = &mut grads[input.0] {
                    let x = self.value(*input);
                    let gv = g.item();
                    for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
                        let (_, slope) = interval_distance(xv, intervals);
                        *d += gv * slope;
                    }
                }
            }
            Op::GatherSum { input, picks } => {
                if let Some(dx) = &mut grads[input.0] {
                    let k = self.value(*input).shape()[1];
                    let gv = g.item();
                    let dx = dx.data_mut();
                    for &(r, c) in picks {
                        dx[r * k + c] += gv;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
        patches: &[f32],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let x = self.value(input);
        let w = self.value(weight);
        let (n, ci, h, w_in) = (
            x.shape()[0],
            x.shape()[1],
            x.shape()[2],
            x.shape()[3],
        );
        let (co, k) = (w.shape()[0], w.shape()[2]);
        let (ho, wo) = (g.shape()[2], g.shape()[3]);
        let positions = ho * wo;
        let kk = ci * k * k;

        if let Some(db) = &mut grads[bias.0] {
            let db = db.data_mut();
            for g_n in g.data().chunks(co * positions) {
                for (c, row) in g_n.chunks(positions).enumerate() {
                    db[c] += row.iter().sum::<f32>();
                }
            }
        }
        if let Some(dw) = &mut grads[weight.0] {
            // One deterministic GEMM over the whole batch: transpose dOut to
            // [Co, N*positions] so it lines up with the stacked patch matrix.
            let mut gt = vec![0.0f32; co * n * positions];
            for nn in 0..n {
                let g_n = &g.data()[nn * co * positions..(nn + 1) * co * positions];
                for c in 0..co {
                    gt[c * n * positions + nn * positions..c * n * positions + (nn + 1) * positions]
                        .copy_from_slice(&g_n[c * positions..(c + 1) * positions]);
                }
            }
            gemm(
                co,
                n * positions,
                kk,
                &gt,
                (n * positions) as isize,
                1,
                patches,
                kk as isize,
                1,
                dw.data_mut(),
                1.0,
            );
        }
        if let Some(dx) = &mut grads[input.0] {
            let w_data = w.data().to_vec();
            let im_stride = ci * h * w_in;
            dx.data_mut()
                .par_chunks_mut(im_stride)
                .zip(g.data().par_chunks(co * positions))
                .for_each(|(dx_n, g_n)| {
                    // dP_n [positions, kk] = dOut_nᵀ [positions, Co] · Wmat [Co, kk]
                    let mut dp = vec![0.0f32; positions * kk];
                    gemm(
                        positions,
                        co,
                        kk,
                        g_n,
                        1,
                        positions as isize,
                        &w_data,
                        kk as isize,
                        1,
                        &mut dp,
                        0.0,
                    );
                    col2im(&dp, ci, h, w_in, k, stride, padding, ho, wo, dx_n);
                });
        }
    }
}

/// SGD with classical momentum: `v ← momentum·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [Tensor],
    velocity: &mut [Tensor],
    grads: &[&Tensor],
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::ShapeMismatch {
            context: "sgd_step",
            expected: format!("{} gradients/velocities", params.len()),
            actual: format!("{} grads, {} velocities", grads.len(), velocity.len()),
        });
    }
    for ((p, v), g) in params.iter_mut().zip(velocity).zip(grads) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::ShapeMismatch {
                context: "sgd_step",
                expected: format!("{:?}", p.shape()),
                actual: format!("grad {:?}, velocity {:?}", g.shape(), v.shape()),
            });
        }
        for ((pv, vv), &gv) in p.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// `(H + 2·padding − k) / stride + 1`, erroring unless the division is exact.
fn conv_extent(op: &'static str, extent: usize, k: usize, stride: usize, padding: usize) -> Result<usize> {
    let numerator = extent + 2 * padding - k;
    if numerator % stride != 0 {
        return Err(Error::NonIntegerOutput {
            op,
            numerator,
            stride,
        });
    }
    Ok(numerator / stride + 1)
}

fn pool_extent(extent: usize, k: usize, stride: usize) -> Result<usize> {
    let numerator = extent - k;
    if numerator % stride != 0 {
        return Err(Error::NonIntegerOutput {
            op: "maxpool2d",
            numerator,
            stride,
        });
    }
    Ok(numerator / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    out: &mut [f32],
) {
    let kk = ci * k * k;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * kk;
            for c in 0..ci {
                let plane = c * h * w;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let dst = row + c * k * k + ky * k;
                    if iy < 0 || iy >= h as isize {
                        continue; // stays zero
                    }
                    let src_row = plane + iy as usize * w;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[dst + kx] = x[src_row + ix as usize];
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    dp: &[f32],
    ci: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    padding: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    let kk = ci * k * k;
    for oy in 0..ho {
        for ox in 0..wo {
            let row = (oy * wo + ox) * kk;
            for c in 0..ci {
                let plane = c * h * w;
                for ky in 0..k {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = row + c * k * k + ky * k;
                    let dst_row = plane + iy as usize * w;
                    for kx in 0..k {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[dst_row + ix as usize] += dp[src + kx];
                    }
                }
            }
        }
    }
}

/// Row-major-or-strided `C = alpha·A·B + beta·C` (alpha fixed at 1).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `-log softmax(row)[label]`, stabilized by max subtraction.
fn row_cross_entropy(row: &[f32], label: usize) -> f32 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum_exp: f32 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum_exp.ln() - row[label]
}

fn row_softmax(row: &[f32]) -> Vec<f32> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Distance from `a` to the union of closed intervals and its derivative
/// w.r.t. `a` (−1 below the nearest interval, +1 above, 0 inside).
pub(crate) fn interval_distance(a: f32, intervals: &[(f32, f32)]) -> (f32, f32) {
    let mut best = f32::INFINITY;
    let mut slope = 0.0;
    for &(lo, hi) in intervals {
        if a >= lo && a <= hi {
            return (0.0, 0.0);
        }
        let (d, s) = if a < lo { (lo - a, -1.0) } else { (a - hi, 1.0) };
        if d < best {
            best = d;
            slope = s;
        }
    }
    if best.is_infinite() {
        (0.0, 0.0) // no intervals: vacuously allowed
    } else {
        (best, slope)
    }
}
