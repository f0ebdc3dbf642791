//! Dense float64 tensors and a tape-based reverse-mode differentiation graph.
//!
//! [`Tensor`] is a plain value (shape plus row-major data). Differentiable
//! computation happens on a [`Graph`]: tensors enter it as trainable
//! variables or constants and every operation on the resulting [`Var`]
//! handles is recorded. [`Graph::backward`] walks the tape once in reverse
//! and returns a [`Gradients`] store; the graph itself is never mutated by a
//! backward pass, so several losses can be differentiated off one forward.

mod graph;
pub mod kernels;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use graph::{ConvSpec, Gradients, Graph, NodeId, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {reason}")]
    Contract { op: &'static str, reason: String },
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        TensorError::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn contract(op: &'static str, reason: impl Into<String>) -> Self {
        TensorError::Contract {
            op,
            reason: reason.into(),
        }
    }
}

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::shape("tensor", &shape, &[data.len()]));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// `n x n` identity.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(TensorError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Slice `[start, start + len)` of the leading axis.
    pub fn narrow_first(&self, start: usize, len: usize) -> Result<Self, TensorError> {
        let Some(&lead) = self.shape.first() else {
            return Err(TensorError::contract("narrow", "scalar tensor"));
        };
        if start + len > lead {
            return Err(TensorError::shape("narrow", &self.shape, &[start, len]));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = len;
        Ok(Self {
            shape,
            data: self.data[start * inner..(start + len) * inner].to_vec(),
        })
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(parts: &[Tensor]) -> Result<Self, TensorError> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::contract("stack", "no tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * parts.len());
        for p in parts {
            if p.shape != first.shape {
                return Err(TensorError::shape("stack", &first.shape, &p.shape));
            }
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![parts.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Self { shape, data })
    }

    /// Bilinear resize of the two trailing axes of a `[.., H, W]` tensor.
    pub fn resize_bilinear(&self, oh: usize, ow: usize) -> Result<Self, TensorError> {
        let (planes, h, w) = spatial_dims("resize_bilinear", &self.shape)?;
        if oh == 0 || ow == 0 {
            return Err(TensorError::shape("resize_bilinear", &self.shape, &[oh, ow]));
        }
        let data = kernels::resize_bilinear(&self.data, planes, h, w, oh, ow);
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        Ok(Self { shape, data })
    }

    /// Mean pooling over non-overlapping `k x k` blocks of the trailing axes.
    pub fn avg_pool2d(&self, k: usize) -> Result<Self, TensorError> {
        let (planes, h, w) = spatial_dims("avg_pool2d", &self.shape)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(TensorError::shape("avg_pool2d", &self.shape, &[k, k]));
        }
        let data = kernels::avg_pool2d(&self.data, planes, h, w, k);
        let mut shape = self.shape.clone();
        let n = shape.len();
        shape[n - 2] = h / k;
        shape[n - 1] = w / k;
        Ok(Self { shape, data })
    }
}

pub(crate) fn spatial_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize), TensorError> {
    if shape.len() < 2 {
        return Err(TensorError::contract(
            op,
            format!("need at least 2 axes, got {shape:?}"),
        ));
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_checks_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(TensorError::Shape { .. })
        ));
    }

    #[test]
    fn pool_of_half_mask() {
        let mut data = vec![0.0; 256];
        data[..128].fill(1.0);
        let t = Tensor::new(vec![16, 16], data).unwrap();
        let p = t.avg_pool2d(16).unwrap();
        assert_eq!(p.shape(), &[1, 1]);
        assert_eq!(p.item(), 0.5);
        assert!(Tensor::zeros(&[15, 16]).avg_pool2d(16).is_err());
    }

    #[test]
    fn stack_and_narrow() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![3.0, 4.0]);
        let s = Tensor::stack(&[a, b.clone()]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.narrow_first(1, 1).unwrap().data(), b.data());
    }
}
