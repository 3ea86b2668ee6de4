//! Dense n-dimensional `f32` tensor, row-major.
//!
//! The single value type flowing through the whole crate: images, weights,
//! activations and gradients are all `Tensor`s.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, checking that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch {
                context: "Tensor::new",
                expected: format!("{} elements for shape {:?}", numel, shape),
                actual: format!("{} elements", data.len()),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    /// Scalar wrapped as a rank-1 tensor of length 1.
    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Scalar value of a one-element tensor.
    pub fn item(&self) -> f32 {
        debug_assert_eq!(self.numel(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Reinterprets the buffer under a new shape of equal element count.
    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn max_value(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute elementwise difference to `other`.
    pub fn linf_distance(&self, other: &Tensor) -> f32 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Copies the `[n]`-th slice along the leading axis into its own tensor.
    pub fn slice_first_axis(&self, n: usize) -> Tensor {
        let stride: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[n * stride..(n + 1) * stride].to_vec(),
        }
    }

    /// Stacks same-shaped `[1, ...]` tensors along the leading axis.
    pub fn stack_first_axis(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyDataset)?;
        let mut shape = first.shape.clone();
        shape[0] = parts.len();
        let mut data = Vec::with_capacity(parts.len() * first.numel());
        for p in parts {
            if p.shape != first.shape {
                return Err(Error::ShapeMismatch {
                    context: "stack_first_axis",
                    expected: format!("{:?}", first.shape),
                    actual: format!("{:?}", p.shape),
                });
            }
            data.extend_from_slice(&p.data);
        }
        Ok(Tensor { shape, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn new_rejects_zero_extent() {
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn slice_and_stack_roundtrip() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let rows: Vec<Tensor> = (0..3).map(|i| t.slice_first_axis(i)).collect();
        assert_eq!(rows[1].data(), &[3.0, 4.0]);
        let back = Tensor::stack_first_axis(&rows).unwrap();
        assert_eq!(back, t);
    }
}
