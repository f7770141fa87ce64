//! Dense row-major `f32` tensors.
//!
//! Feature maps are rank 5, `(batch, channel, depth, height, width)`, with the
//! width axis innermost. Wavelet subbands add a sixth axis of length 8 after
//! the channel axis. Parameters may have any rank.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

/// Spatial extent `(D, H, W)`.
pub type Dims3 = [usize; 3];

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f32) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f32) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
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

    /// The shape as `[B, C, D, H, W]`, or a dimension error naming `op`.
    pub fn dims5(&self, op: &'static str) -> Result<[usize; 5]> {
        match self.shape.as_slice() {
            &[b, c, d, h, w] => Ok([b, c, d, h, w]),
            other => Err(Error::dim(op, format!("expected rank-5 tensor, got shape {other:?}"))),
        }
    }

    /// The shape as `[B, C, 8, D, H, W]` for a subband tensor.
    pub fn dims6(&self, op: &'static str) -> Result<[usize; 6]> {
        match self.shape.as_slice() {
            &[b, c, s, d, h, w] => Ok([b, c, s, d, h, w]),
            other => Err(Error::dim(op, format!("expected rank-6 tensor, got shape {other:?}"))),
        }
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Tensor {
        debug_assert_eq!(self.shape, other.shape);
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn fill(&mut self, value: f32) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Copies a `(D, H, W)` block starting at `start` out of every `(b, c)`
    /// plane of a rank-5 tensor.
    pub fn crop3(&self, start: Dims3, size: Dims3) -> Result<Tensor> {
        let [b, c, d, h, w] = self.dims5("crop3")?;
        for axis in 0..3 {
            if start[axis] + size[axis] > [d, h, w][axis] {
                return Err(Error::dim(
                    "crop3",
                    format!("axis {axis}: block {}+{} exceeds {}", start[axis], size[axis], [d, h, w][axis]),
                ));
            }
        }
        let mut out = Vec::with_capacity(b * c * size.iter().product::<usize>());
        for plane in 0..b * c {
            let base = plane * d * h * w;
            for z in start[0]..start[0] + size[0] {
                for y in start[1]..start[1] + size[1] {
                    let row = base + (z * h + y) * w + start[2];
                    out.extend_from_slice(&self.data[row..row + size[2]]);
                }
            }
        }
        Tensor::new(&[b, c, size[0], size[1], size[2]], out)
    }

    /// Reverses the width axis of a rank-5 tensor.
    pub fn flip_w(&self) -> Result<Tensor> {
        let [_, _, _, _, w] = self.dims5("flip_w")?;
        let mut out = self.clone();
        for row in out.data.chunks_mut(w) {
            row.reverse();
        }
        Ok(out)
    }
}
