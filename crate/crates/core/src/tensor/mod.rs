//! Dense row-major `f64` tensors and the primitive kernels the fusion
//! operators are assembled from.
//!
//! Everything here is a pure function of its inputs. Matrix products use a
//! fixed `i-k-j` loop order so that every entry is accumulated over `k` in
//! ascending order; results are bit-reproducible for a given build.

mod grid;
mod sampling;
mod transform;

pub use grid::{CoordField, VoxelGrid};
pub use sampling::{
    sample_point, sampling_weights, trilinear_jacobian, trilinear_sample, weight_gradients,
    Jacobian,
};
pub use transform::{transform_coords, RigidTransform};

use crate::error::{shape_err, Error, Result};

/// Regularizer added to the per-column variance before the square root.
pub const NORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!("tensor extents must be positive: {dims:?}")));
        }
        let len: usize = dims.iter().product();
        if len != data.len() {
            return Err(shape_err("Tensor::new", len, data.len()));
        }
        Ok(Self { dims, data })
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, 0.0)
    }

    pub fn full(dims: &[usize], value: f64) -> Self {
        assert!(dims.iter().all(|&d| d > 0), "tensor extents must be positive");
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let mut t = Self::zeros(dims);
        for (i, v) in t.data.iter_mut().enumerate() {
            *v = f(i);
        }
        t
    }

    /// Column vector (`n × 1`) from a slice.
    pub fn column(values: &[f64]) -> Self {
        Self {
            dims: vec![values.len(), 1],
            data: values.to_vec(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
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

    pub fn reshape(self, dims: Vec<usize>) -> Result<Self> {
        Self::new(dims, self.data)
    }

    /// `(rows, cols)` of a rank-2 tensor.
    pub fn shape2(&self) -> Result<(usize, usize)> {
        match self.dims[..] {
            [r, c] => Ok((r, c)),
            _ => Err(shape_err("shape2", "rank 2", &self.dims)),
        }
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dims[1] + j]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let cols = self.dims[1];
        self.data[i * cols + j] = v;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Standard matrix product with ascending-`k` accumulation per entry.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.shape2()?;
        let (k2, n) = other.shape2()?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] x [{k}, _]"), format!("[{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, &b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Ok(Tensor {
            dims: vec![m, n],
            data: out,
        })
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_transposed(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.shape2()?;
        let (n, k2) = other.shape2()?;
        if k != k2 {
            return Err(shape_err("matmul_transposed", format!("[_, {k}]"), format!("[{n}, {k2}]")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[p] * b[p];
                }
                out[i * n + j] = acc;
            }
        }
        Ok(Tensor {
            dims: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.shape2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor {
            dims: vec![c, r],
            data: out,
        })
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        if self.dims != other.dims {
            return Err(shape_err(op, &self.dims, &other.dims));
        }
        Ok(Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn hadamard(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    pub fn hadamard_div(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "hadamard_div", |a, b| a / b)
    }

    pub fn scale(&self, s: f64) -> Tensor {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    /// `self − s·other`, the shape every descent update takes.
    pub fn axpy_neg(&self, s: f64, other: &Tensor) -> Result<Tensor> {
        self.zip_with(other, "axpy_neg", |a, b| a - s * b)
    }

    /// Compensated sum of all entries.
    pub fn sum(&self) -> f64 {
        compensated_sum(self.data.iter().copied())
    }

    /// Compensated sum of squares (squared Frobenius norm).
    pub fn sum_sq(&self) -> f64 {
        compensated_sum(self.data.iter().map(|v| v * v))
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Neumaier-compensated summation.
pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Result of [`zscore_norm`]: normalized values plus the per-column
/// statistics reused by the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub zhat: Tensor,
    /// `1 × n` per-column means.
    pub mu: Tensor,
    /// `1 × n` per-column `sqrt(var + eps)`.
    pub sigma: Tensor,
}

/// Z-score normalization of each column of a `c × n` matrix over its `c`
/// channel entries.
pub fn zscore_norm(z: &Tensor, eps: f64) -> Result<Normalized> {
    let (c, n) = z.shape2()?;
    if eps <= 0.0 {
        return Err(Error::Argument(format!("zscore eps must be positive, got {eps}")));
    }
    let inv_c = 1.0 / c as f64;
    let mut mu = vec![0.0; n];
    let mut sigma = vec![0.0; n];
    let mut zhat = vec![0.0; c * n];
    for j in 0..n {
        let mut mean = 0.0;
        for i in 0..c {
            mean += z.data[i * n + j];
        }
        mean *= inv_c;
        let mut var = 0.0;
        for i in 0..c {
            let d = z.data[i * n + j] - mean;
            var += d * d;
        }
        var *= inv_c;
        let s = (var + eps).sqrt();
        for i in 0..c {
            zhat[i * n + j] = (z.data[i * n + j] - mean) / s;
        }
        mu[j] = mean;
        sigma[j] = s;
    }
    Ok(Normalized {
        zhat: Tensor {
            dims: vec![c, n],
            data: zhat,
        },
        mu: Tensor {
            dims: vec![1, n],
            data: mu,
        },
        sigma: Tensor {
            dims: vec![1, n],
            data: sigma,
        },
    })
}
