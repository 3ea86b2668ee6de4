//! Model definitions: layer list, parameter tensors, instrumentation points,
//! and compute-cost accounting.
//!
//! Instrumentation points are exactly the post-ReLU activation tensors, in
//! forward order. That is what a deployed range check sees, and ReLU
//! guarantees the profiled values are nonnegative, so interval taboos with a
//! zero lower edge stay meaningful.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool2d {
        kernel: usize,
        stride: usize,
    },
    Relu,
    Flatten,
    Linear {
        in_f: usize,
        out_f: usize,
    },
}

impl Layer {
    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match self {
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                ..
            } => Some((vec![*out_ch, *in_ch, *kernel, *kernel], vec![*out_ch])),
            Layer::Linear { in_f, out_f } => Some((vec![*out_f, *in_f], vec![*out_f])),
            _ => None,
        }
    }

    fn fan_in(&self) -> usize {
        match self {
            Layer::Conv2d { in_ch, kernel, .. } => in_ch * kernel * kernel,
            Layer::Linear { in_f, .. } => *in_f,
            _ => 0,
        }
    }
}

/// A feed-forward network: ordered layers plus their parameter tensors
/// (weight, bias per parameterized layer, in layer order).
#[derive(Debug, Clone)]
pub struct Model {
    pub layers: Vec<Layer>,
    pub params: Vec<Tensor>,
    /// Per-sample input shape, without the batch axis.
    pub input_shape: Vec<usize>,
    pub descriptor: String,
}

/// Forward-pass handles: the input leaf, the logits node, the post-ReLU
/// instrumentation taps in forward order, and the parameter leaf ids.
pub struct ForwardPass {
    pub input: NodeId,
    pub logits: NodeId,
    pub taps: Vec<NodeId>,
    pub param_ids: Vec<NodeId>,
}

/// Inference cost counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overhead {
    pub macs: u64,
    pub params: u64,
}

impl Model {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for layer in &layers {
            if let Some((w_shape, b_shape)) = layer.param_shapes() {
                let bound = 1.0 / (layer.fan_in() as f32).sqrt();
                let w: Vec<f32> = (0..w_shape.iter().product::<usize>())
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                let b: Vec<f32> = (0..b_shape.iter().product::<usize>())
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect();
                params.push(Tensor::new(w_shape, w).unwrap());
                params.push(Tensor::new(b_shape, b).unwrap());
            }
        }
        let descriptor = describe(&layers, &input_shape);
        Self {
            layers,
            params,
            input_shape,
            descriptor,
        }
    }

    /// Rebuilds a model from its descriptor string plus parameter tensors.
    pub fn from_descriptor(descriptor: &str, params: Vec<Tensor>) -> Result<Self> {
        let (layers, input_shape) = parse_descriptor(descriptor)?;
        let expected: usize = layers
            .iter()
            .filter(|l| l.param_shapes().is_some())
            .count()
            * 2;
        if params.len() != expected {
            return Err(Error::MalformedCheckpoint(format!(
                "descriptor wants {} parameter tensors, file has {}",
                expected,
                params.len()
            )));
        }
        let descriptor = describe(&layers, &input_shape);
        Ok(Self {
            layers,
            params,
            input_shape,
            descriptor,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Number of instrumentation points (post-ReLU tensors).
    pub fn instrumentation_points(&self) -> usize {
        self.layers.iter().filter(|l| matches!(l, Layer::Relu)).count()
    }

    /// Builds the forward graph for a batch. `input_requires_grad` flags the
    /// image node for input gradients (attack generation); `train` flags the
    /// parameters.
    pub fn forward_graph(
        &self,
        g: &mut ComputeGraph,
        input: Tensor,
        input_requires_grad: bool,
        train: bool,
    ) -> Result<ForwardPass> {
        let mut node = g.leaf(input, input_requires_grad);
        let input_node = node;
        let mut param_ids = Vec::with_capacity(self.params.len());
        let mut taps = Vec::new();
        let mut p = 0usize;
        for layer in &self.layers {
            node = match layer {
                Layer::Conv2d { stride, padding, .. } => {
                    let w = g.leaf(self.params[p].clone(), train);
                    let b = g.leaf(self.params[p + 1].clone(), train);
                    param_ids.push(w);
                    param_ids.push(b);
                    p += 2;
                    g.conv2d(node, w, b, *stride, *padding)?
                }
                Layer::Linear { .. } => {
                    let w = g.leaf(self.params[p].clone(), train);
                    let b = g.leaf(self.params[p + 1].clone(), train);
                    param_ids.push(w);
                    param_ids.push(b);
                    p += 2;
                    g.linear(node, w, b)?
                }
                Layer::MaxPool2d { kernel, stride } => g.maxpool2d(node, *kernel, *stride)?,
                Layer::Relu => {
                    let r = g.relu(node);
                    taps.push(r);
                    r
                }
                Layer::Flatten => g.flatten(node),
            };
        }
        Ok(ForwardPass {
            input: input_node,
            logits: node,
            taps,
            param_ids,
        })
    }

    /// Forward on a batch, returning logits and the tap activations.
    pub fn forward(&self, input: Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut g = ComputeGraph::new();
        let pass = self.forward_graph(&mut g, input, false, false)?;
        let logits = g.value(pass.logits).clone();
        let taps = pass.taps.iter().map(|&t| g.value(t).clone()).collect();
        Ok((logits, taps))
    }

    /// Argmax predictions over a batch, chunked and evaluated in parallel.
    pub fn predict(&self, images: &Tensor) -> Result<Vec<u8>> {
        let n = images.shape()[0];
        let stride: usize = images.shape()[1..].iter().product();
        let chunk = 256usize;
        let shape_rest = &images.shape()[1..];
        let results: Vec<Result<Vec<u8>>> = (0..n)
            .collect::<Vec<_>>()
            .par_chunks(chunk)
            .map(|idxs| {
                let mut shape = vec![idxs.len()];
                shape.extend_from_slice(shape_rest);
                let start = idxs[0] * stride;
                let end = start + idxs.len() * stride;
                let batch = Tensor::new(shape, images.data()[start..end].to_vec())?;
                let (logits, _) = self.forward(batch)?;
                Ok(argmax_rows(&logits))
            })
            .collect();
        let mut out = Vec::with_capacity(n);
        for r in results {
            out.extend(r?);
        }
        Ok(out)
    }

    pub fn accuracy(&self, images: &Tensor, labels: &[u8]) -> Result<f64> {
        let preds = self.predict(images)?;
        let correct = preds
            .iter()
            .zip(labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Multiply-accumulate and parameter counts. The violation detector is a
    /// plain value comparison against stored thresholds, so asking for it
    /// adds exactly zero to both counts.
    pub fn count_overhead(&self, with_detector: bool) -> Overhead {
        let mut macs = 0u64;
        let mut shape = self.input_shape.clone();
        for layer in &self.layers {
            match layer {
                Layer::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                } => {
                    let (h, w) = (shape[1], shape[2]);
                    let ho = (h + 2 * padding - kernel) / stride + 1;
                    let wo = (w + 2 * padding - kernel) / stride + 1;
                    macs += (out_ch * ho * wo * in_ch * kernel * kernel) as u64;
                    shape = vec![*out_ch, ho, wo];
                }
                Layer::MaxPool2d { kernel, stride } => {
                    shape = vec![
                        shape[0],
                        (shape[1] - kernel) / stride + 1,
                        (shape[2] - kernel) / stride + 1,
                    ];
                }
                Layer::Flatten => shape = vec![shape.iter().product()],
                Layer::Linear { in_f, out_f } => {
                    macs += (in_f * out_f) as u64;
                    shape = vec![*out_f];
                }
                Layer::Relu => {}
            }
        }
        let _ = with_detector; // comparisons are not MACs; nothing to add
        Overhead {
            macs,
            params: self.param_count() as u64,
        }
    }
}

pub fn argmax_rows(logits: &Tensor) -> Vec<u8> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// The 20/50/500 LeNet5 build: conv(1→20,5) – pool2 – relu – conv(20→50,5) –
/// pool2 – relu – linear(800→500) – relu – linear(500→10). 431,080 parameters,
/// three instrumentation points.
pub fn build_lenet5(seed: u64) -> Model {
    Model::new(
        vec![
            Layer::Conv2d {
                in_ch: 1,
                out_ch: 20,
                kernel: 5,
                stride: 1,
                padding: 0,
            },
            Layer::MaxPool2d { kernel: 2, stride: 2 },
            Layer::Relu,
            Layer::Conv2d {
                in_ch: 20,
                out_ch: 50,
                kernel: 5,
                stride: 1,
                padding: 0,
            },
            Layer::MaxPool2d { kernel: 2, stride: 2 },
            Layer::Relu,
            Layer::Flatten,
            Layer::Linear { in_f: 800, out_f: 500 },
            Layer::Relu,
            Layer::Linear { in_f: 500, out_f: 10 },
        ],
        vec![1, 28, 28],
        seed,
    )
}

fn describe(layers: &[Layer], input_shape: &[usize]) -> String {
    let mut parts: Vec<String> = vec![format!(
        "input:{}",
        input_shape
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("x")
    )];
    for layer in layers {
        parts.push(match layer {
            Layer::Conv2d {
                in_ch,
                out_ch,
                kernel,
                stride,
                padding,
            } => format!("conv:{in_ch}:{out_ch}:{kernel}:{stride}:{padding}"),
            Layer::MaxPool2d { kernel, stride } => format!("pool:{kernel}:{stride}"),
            Layer::Relu => "relu".to_string(),
            Layer::Flatten => "flatten".to_string(),
            Layer::Linear { in_f, out_f } => format!("linear:{in_f}:{out_f}"),
        });
    }
    parts.join(";")
}

fn parse_descriptor(descriptor: &str) -> Result<(Vec<Layer>, Vec<usize>)> {
    let mut layers = Vec::new();
    let mut input_shape = Vec::new();
    let bad = |part: &str| Error::MalformedCheckpoint(format!("bad descriptor part '{part}'"));
    for part in descriptor.split(';') {
        let fields: Vec<&str> = part.split(':').collect();
        match fields[0] {
            "input" => {
                input_shape = fields[1]
                    .split('x')
                    .map(|v| v.parse().map_err(|_| bad(part)))
                    .collect::<Result<Vec<usize>>>()?;
            }
            "conv" => {
                if fields.len() != 6 {
                    return Err(bad(part));
                }
                let nums: Vec<usize> = fields[1..]
                    .iter()
                    .map(|v| v.parse().map_err(|_| bad(part)))
                    .collect::<Result<Vec<usize>>>()?;
                layers.push(Layer::Conv2d {
                    in_ch: nums[0],
                    out_ch: nums[1],
                    kernel: nums[2],
                    stride: nums[3],
                    padding: nums[4],
                });
            }
            "pool" => {
                if fields.len() != 3 {
                    return Err(bad(part));
                }
                layers.push(Layer::MaxPool2d {
                    kernel: fields[1].parse().map_err(|_| bad(part))?,
                    stride: fields[2].parse().map_err(|_| bad(part))?,
                });
            }
            "relu" => layers.push(Layer::Relu),
            "flatten" => layers.push(Layer::Flatten),
            "linear" => {
                if fields.len() != 3 {
                    return Err(bad(part));
                }
                layers.push(Layer::Linear {
                    in_f: fields[1].parse().map_err(|_| bad(part))?,
                    out_f: fields[2].parse().map_err(|_| bad(part))?,
                });
            }
            _ => return Err(bad(part)),
        }
    }
    if input_shape.is_empty() {
        return Err(Error::MalformedCheckpoint(
            "descriptor missing input shape".into(),
        ));
    }
    Ok((layers, input_shape))
}
