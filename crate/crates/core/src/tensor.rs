//! Dense row-major `f32` tensors and the handful of kernels the toy MoE
//! forward pass and the expert distance computation need.
//!
//! Storage is `f32`; every reduction accumulates in `f64` and loops run in a
//! fixed index-ascending order so results are bit-reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
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

    pub fn vector(data: Vec<f32>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Row-major matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// i.i.d. `normal(0, std)` entries, drawn in storage order.
    pub fn randn(shape: &[usize], std: f64, rng: &mut SeededRng) -> Self {
        let mut t = Self::zeros(shape);
        t.add_noise(std, rng);
        t
    }

    /// Adds i.i.d. `normal(0, std)` noise in storage order. A zero `std`
    /// leaves the tensor untouched and consumes no randomness.
    pub fn add_noise(&mut self, std: f64, rng: &mut SeededRng) {
        if std == 0.0 {
            return;
        }
        for x in &mut self.data {
            *x = (f64::from(*x) + std * rng.normal()) as f32;
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

fn dims2(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::Shape(format!("{what} must be 2-D, got {s:?}"))),
    }
}

/// `c[i][j] = sum_t a[i][t] * b[t][j]`, `t` ascending, `f64` accumulator.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = dims2(a, "lhs")?;
    let (k2, n) = dims2(b, "rhs")?;
    if k != k2 {
        return Err(Error::Shape(format!(
            "matmul inner dimensions differ: {m}x{k} by {k2}x{n}"
        )));
    }
    let mut out = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f64;
            for t in 0..k {
                acc += f64::from(a.data[i * k + t]) * f64::from(b.data[t * n + j]);
            }
            out[i * n + j] = acc as f32;
        }
    }
    Tensor::new(vec![m, n], out)
}

/// `w · x` for a weight matrix `w` of shape `[out, in]`; identical arithmetic
/// to `matmul(w, x as [in, 1])`.
pub fn matvec(w: &Tensor, x: &[f32]) -> Result<Vec<f32>> {
    let (rows, cols) = dims2(w, "weight")?;
    if cols != x.len() {
        return Err(Error::Shape(format!(
            "matvec: weight is {rows}x{cols}, input has {} elements",
            x.len()
        )));
    }
    Ok(w.data
        .chunks_exact(cols)
        .map(|row| {
            let mut acc = 0.0f64;
            for (a, b) in row.iter().zip(x) {
                acc += f64::from(*a) * f64::from(*b);
            }
            acc as f32
        })
        .collect())
}

/// Numerically stable softmax over a flat vector.
pub fn softmax(v: &[f32]) -> Result<Vec<f32>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f64> = v.iter().map(|&x| f64::from(x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| (e / sum) as f32).collect())
}

/// The `k` largest entries as `(index, value)`, descending by value with ties
/// going to the lower index.
pub fn top_k(v: &[f32], k: usize) -> Result<Vec<(usize, f32)>> {
    if k == 0 || k > v.len() {
        return Err(Error::InvalidArgument(format!(
            "top_k needs 1 <= k <= {}, got {k}",
            v.len()
        )));
    }
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    Ok(idx.into_iter().take(k).map(|i| (i, v[i])).collect())
}

/// Running sum of squared differences; lets callers stream several slices
/// through one accumulator.
pub fn accumulate_sq_diff(acc: &mut f64, a: &[f32], b: &[f32]) {
    for (x, y) in a.iter().zip(b) {
        let d = f64::from(*x) - f64::from(*y);
        *acc += d * d;
    }
}

/// Euclidean distance between two equally shaped tensors.
pub fn l2_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "l2_distance: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    let mut acc = 0.0;
    accumulate_sq_diff(&mut acc, &a.data, &b.data);
    Ok(acc.sqrt())
}

/// `gain[i] * v[i] / sqrt(mean(v^2) + eps)`.
pub fn rms_norm(v: &[f32], gain: &[f32], eps: f64) -> Result<Vec<f32>> {
    if v.len() != gain.len() {
        return Err(Error::Shape(format!(
            "rms_norm: input {} vs gain {}",
            v.len(),
            gain.len()
        )));
    }
    if v.is_empty() {
        return Err(Error::Shape("rms_norm of an empty vector".into()));
    }
    let mut ss = 0.0f64;
    for x in v {
        ss += f64::from(*x) * f64::from(*x);
    }
    let inv = 1.0 / (ss / v.len() as f64 + eps).sqrt();
    Ok(v.iter()
        .zip(gain)
        .map(|(x, g)| (f64::from(*g) * f64::from(*x) * inv) as f32)
        .collect())
}

pub fn silu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    (x / (1.0 + (-x).exp())) as f32
}

/// Elementwise `x * sigmoid(x)`.
pub fn silu(v: &[f32]) -> Vec<f32> {
    v.iter().copied().map(silu_scalar).collect()
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate().skip(1) {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
