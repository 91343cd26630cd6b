//! Dense row-major `f64` tensor and the handful of kernels the networks need.

use crate::error::{LabError, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Output rows handed to one worker in the matmul kernels.
const ROWS_PER_TASK: usize = 16;
/// Products below this size are computed on the calling thread.
const PARALLEL_FLOPS: usize = 1 << 16;

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(LabError::InvalidShape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { shape: shape.to_vec(), data: vec![0.0; shape.iter().product()] }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self { shape: shape.to_vec(), data: vec![value; shape.iter().product()] }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self { shape: vec![data.len()], data }
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) dimension.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of values per leading-dimension entry.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(LabError::InvalidShape(format!(
                "cannot reshape {:?} to {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Copies the listed leading-dimension entries into a new batch.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let w = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Self { shape, data }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.data.len(), other.data.len());
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }

    pub fn scale_assign(&mut self, k: f64) {
        self.data.iter_mut().for_each(|a| *a *= k);
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Index of the largest entry of each row (first one on ties).
    pub fn argmax_rows(&self) -> Vec<usize> {
        (0..self.rows())
            .map(|i| {
                let r = self.row(i);
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

/// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
pub fn matmul_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let kernel = |i0: usize, rows: &mut [f64]| {
        for (r, orow) in rows.chunks_mut(n).enumerate() {
            let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
            for (j, o) in orow.iter_mut().enumerate() {
                let brow = &b[j * k..(j + 1) * k];
                *o = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            }
        }
    };
    run_rows(&mut out, m, n, k, kernel);
    out
}

/// `a · b` for `a: [m, k]`, `b: [k, n]`.
pub fn matmul_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let kernel = |i0: usize, rows: &mut [f64]| {
        for (r, orow) in rows.chunks_mut(n).enumerate() {
            let arow = &a[(i0 + r) * k..(i0 + r + 1) * k];
            for (p, &av) in arow.iter().enumerate() {
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
            }
        }
    };
    run_rows(&mut out, m, n, k, kernel);
    out
}

/// `aᵀ · b` for `a: [m, k]`, `b: [m, n]`, giving `[k, n]`.
pub fn matmul_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    let kernel = |p0: usize, rows: &mut [f64]| {
        for (r, orow) in rows.chunks_mut(n).enumerate() {
            let p = p0 + r;
            for i in 0..m {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[i * n..(i + 1) * n];
                orow.iter_mut().zip(brow).for_each(|(o, &bv)| *o += av * bv);
            }
        }
    };
    run_rows(&mut out, k, n, m, kernel);
    out
}

fn run_rows<F>(out: &mut [f64], rows: usize, cols: usize, inner: usize, kernel: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if cols == 0 || rows == 0 {
        return;
    }
    if rows * cols * inner < PARALLEL_FLOPS {
        kernel(0, out);
        return;
    }
    par::for_each_chunk_mut(out, ROWS_PER_TASK * cols, |c, chunk| {
        kernel(c * ROWS_PER_TASK, chunk)
    });
}
