//! Dense f32 tensors and the matrix kernels behind every network in the
//! crate.
//!
//! Values are stored row-major in f32. Reductions and statistics accumulate
//! in f64 so that losses are stable enough for finite-difference checking.
//! The kernels are plain loops shaped so the compiler can vectorize them;
//! there is no threading, everything in this crate runs on one core.

mod adam;
mod gradcheck;
mod tape;

pub use adam::{clip_grad_norm, Adam};
pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Gradients, Tape, Var};

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::StandardNormal;

/// Dense row-major f32 tensor with an optional gradient buffer.
///
/// Trainable parameters carry a gradient of the same shape; activations and
/// frozen weights leave it unset.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
            grad: None,
        }
    }

    pub fn full(shape: Vec<usize>, value: f32) -> Self {
        let numel: usize = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
            grad: None,
        }
    }

    /// Independent N(0, std^2) entries.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f32, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f32 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Self {
            shape,
            data,
            grad: None,
        }
    }

    /// Orthogonal init for a `rows x cols` weight, scaled by `gain`.
    ///
    /// Rows (or columns, whichever is shorter) of the result are orthonormal
    /// before scaling. Uses double-pass Gram-Schmidt in f64 on a Gaussian
    /// draw, which is well conditioned at these sizes.
    pub fn orthogonal<R: Rng>(rows: usize, cols: usize, gain: f32, rng: &mut R) -> Self {
        let (major, minor) = if rows >= cols { (rows, cols) } else { (cols, rows) };
        // Orthonormalize `minor` vectors of length `major`.
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(minor);
        for _ in 0..minor {
            let mut v: Vec<f64> = (0..major)
                .map(|_| {
                    let z: f32 = rng.sample(StandardNormal);
                    z as f64
                })
                .collect();
            for _pass in 0..2 {
                for b in &basis {
                    let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= dot * *y;
                    }
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            for x in &mut v {
                *x /= norm;
            }
            basis.push(v);
        }
        let mut data = vec![0.0f32; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                let val = if rows >= cols {
                    basis[c][r]
                } else {
                    basis[r][c]
                };
                data[r * cols + c] = (val * gain as f64) as f32;
            }
        }
        Self {
            shape: vec![rows, cols],
            data,
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row count for a 2-D tensor; 1-D tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[0],
        }
    }

    /// Column count for a 2-D tensor; 1-D tensors are one row wide.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    /// Allocates (or clears) the gradient buffer.
    pub fn zero_grad(&mut self) {
        match &mut self.grad {
            Some(g) => g.iter_mut().for_each(|x| *x = 0.0),
            None => self.grad = Some(vec![0.0; self.data.len()]),
        }
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) {
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
        }
        let g = self.grad.as_mut().unwrap();
        for (dst, src) in g.iter_mut().zip(delta) {
            *dst += *src;
        }
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f32]> {
        self.grad.as_deref_mut()
    }

    /// True if every element is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// out += A (m x k) * B (k x n).
///
/// Row-axpy ordering: each A element scales a whole row of B into a row of
/// `out`, which keeps the inner loop contiguous and vectorizable.
pub fn matmul_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
}

/// out += A (m x k) * B^T where B is n x k.
///
/// Dot-product ordering with eight independent accumulators so the reduction
/// does not serialize on one register.
pub fn matmul_nt_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            out_row[j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// out += A^T (k x m view of an m x k buffer) * B (m x n).
pub fn matmul_tn_acc(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, out: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for j in 0..n {
                out_row[j] += aik * b_row[j];
            }
        }
    }
}

/// A (m x k) * B (k x n) into a fresh buffer.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    matmul_acc(a, b, m, k, n, &mut out);
    out
}

/// Dot product with a widened accumulator bank.
pub fn dot(x: &[f32], y: &[f32]) -> f32 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [0.0f32; 8];
    let chunks = x.len() / 8;
    for c in 0..chunks {
        let o = c * 8;
        for l in 0..8 {
            acc[l] += x[o + l] * y[o + l];
        }
    }
    let mut s = acc.iter().sum::<f32>();
    for i in chunks * 8..x.len() {
        s += x[i] * y[i];
    }
    s
}

/// Transposes an m x n row-major buffer.
pub fn transpose(a: &[f32], m: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Mean of a slice accumulated in f64.
pub fn mean_f64(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64
}

/// Population variance of a slice accumulated in f64.
pub fn var_f64(x: &[f32]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let mu = mean_f64(x);
    x.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / x.len() as f64
}

/// Euclidean norm accumulated in f64.
pub fn norm_f64(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt()
}
