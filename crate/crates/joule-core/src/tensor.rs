//! Dense row-major f64 tensors.
//!
//! Everything numeric in this crate moves through [`Tensor`]: network
//! activations, parameters, chain states, fitted statistics. The layout is a
//! flat `Vec<f64>` in row-major order with an explicit shape, and all compute
//! stays in f64 so finite-difference checks have headroom.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    /// Builds a tensor from a flat row-major buffer, validating the length.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if data.len() != n {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_vec",
                expected: shape.to_vec(),
                got: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    /// Reinterprets the buffer under a new shape of identical element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::reshaped",
                expected: shape.to_vec(),
                got: self.shape.clone(),
            });
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// 2-D element access; only valid on rank-2 tensors.
    #[inline]
    pub fn at2(&self, r: usize, c: usize) -> f64 {
        debug_assert_eq!(self.rank(), 2);
        self.data[r * self.shape[1] + c]
    }

    #[inline]
    pub fn at2_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        debug_assert_eq!(self.rank(), 2);
        let cols = self.shape[1];
        &mut self.data[r * cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute entry; 0 for empty tensors. NaN entries poison the
    /// result to NaN so divergence checks cannot miss them.
    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for &v in &self.data {
            if v.is_nan() {
                return f64::NAN;
            }
            let a = v.abs();
            if a > m {
                m = a;
            }
        }
        m
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// Treats the first axis as a batch axis and returns sample `i` as a
    /// flat slice.
    pub fn row(&self, i: usize) -> &[f64] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let stride: usize = self.shape[1..].iter().product();
        &mut self.data[i * stride..(i + 1) * stride]
    }

    /// Number of samples along the leading (batch) axis.
    pub fn batch_len(&self) -> usize {
        self.shape[0]
    }

    /// Per-sample shape of a batched tensor (everything after the batch axis).
    pub fn sample_shape(&self) -> &[usize] {
        &self.shape[1..]
    }

    /// Copies sample `i` of a batched tensor into a standalone tensor.
    pub fn sample(&self, i: usize) -> Tensor {
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.row(i).to_vec(),
        }
    }

    /// Stacks same-shaped tensors along a new leading batch axis.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples.first().ok_or(Error::EmptyDataset)?;
        let mut shape = Vec::with_capacity(first.rank() + 1);
        shape.push(samples.len());
        shape.extend_from_slice(first.shape());
        let mut data = Vec::with_capacity(samples.len() * first.len());
        for s in samples {
            if s.shape() != first.shape() {
                return Err(Error::ShapeMismatch {
                    context: "Tensor::stack",
                    expected: first.shape().to_vec(),
                    got: s.shape().to_vec(),
                });
            }
            data.extend_from_slice(s.data());
        }
        Ok(Tensor { shape, data })
    }

    /// Lifts a single sample to a batch of one.
    pub fn unsqueezed(&self) -> Tensor {
        let mut shape = Vec::with_capacity(self.rank() + 1);
        shape.push(1);
        shape.extend_from_slice(&self.shape);
        Tensor {
            shape,
            data: self.data.clone(),
        }
    }

    /// In-place `self += scale * other`. Shapes must match exactly.
    pub fn add_scaled(&mut self, other: &Tensor, scale: f64) {
        assert_eq!(self.shape, other.shape, "add_scaled shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

pub fn same_shape(context: &'static str, expected: &[usize], got: &[usize]) -> Result<()> {
    if expected != got {
        return Err(Error::ShapeMismatch {
            context,
            expected: expected.to_vec(),
            got: got.to_vec(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_bad_length() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn row_major_layout() {
        let t = Tensor::from_vec(&[2, 3], (0..6).map(|i| i as f64).collect()).unwrap();
        assert_eq!(t.at2(0, 2), 2.0);
        assert_eq!(t.at2(1, 0), 3.0);
        assert_eq!(t.row(1), &[3.0, 4.0, 5.0]);
    }

    #[test]
    fn max_abs_poisons_on_nan() {
        let t = Tensor::from_vec(&[3], vec![1.0, -4.0, 2.0]).unwrap();
        assert_eq!(t.max_abs(), 4.0);
        let n = Tensor::from_vec(&[2], vec![1.0, f64::NAN]).unwrap();
        assert!(n.max_abs().is_nan());
        assert!(!n.is_finite());
    }

    #[test]
    fn stack_and_sample_round_trip() {
        let a = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::from_vec(&[2], vec![3.0, 4.0]).unwrap();
        let s = Tensor::stack(&[a.clone(), b]).unwrap();
        assert_eq!(s.shape(), &[2, 2]);
        assert_eq!(s.sample(0), a);
        assert_eq!(s.batch_len(), 2);
    }
}
