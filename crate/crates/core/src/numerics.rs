//! Dense f64 kernels and the seeded random stream shared by every other
//! module.
//!
//! Everything here is single-threaded and allocation-light. Vectors are plain
//! `[f64]` slices; [`Matrix`] is a row-major buffer with its shape.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

const GELU_COEF: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_SCALE: f64 = 0.797_884_560_802_865_4;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    /// Glorot-uniform initialisation, bound `sqrt(6 / (fan_in + fan_out))`.
    pub fn glorot_uniform(rows: usize, cols: usize, rng: &mut SeededRng) -> Self {
        let bound = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    /// `self += scale * a bᵀ`.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            if ar == 0.0 {
                continue;
            }
            let s = scale * ar;
            for (w, &bc) in self.row_mut(r).iter_mut().zip(b) {
                *w += s * bc;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `m · v`.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if m.cols != v.len() {
        return Err(Error::shape(format!(
            "matvec: matrix has {} columns, vector has dim {}",
            m.cols,
            v.len()
        )));
    }
    Ok((0..m.rows).map(|r| dot(m.row(r), v)).collect())
}

/// `mᵀ · v`.
pub fn matvec_transpose(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if m.rows != v.len() {
        return Err(Error::shape(format!(
            "matvec_transpose: matrix has {} rows, vector has dim {}",
            m.rows,
            v.len()
        )));
    }
    let mut out = vec![0.0; m.cols];
    for (r, &vr) in v.iter().enumerate() {
        axpy(&mut out, vr, m.row(r));
    }
    Ok(out)
}

/// Sequential dot product. Summation order is fixed so results are
/// reproducible bit for bit.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`.
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn add_assign(y: &mut [f64], x: &[f64]) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += xi;
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::shape("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("softmax input contains a non-finite value"));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    // Summing in sorted order makes the result independent of entry order.
    let mut sorted = out.clone();
    sorted.sort_unstable_by(f64::total_cmp);
    let sum: f64 = sorted.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    Ok(out)
}

/// `ln(sum(exp(v)))` with max subtraction.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

/// `ln(1 + e^x)`, stable for large `|x|`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, the derivative of [`softplus`].
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU, tanh approximation.
pub fn gelu(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + inner.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_SCALE * (x + GELU_COEF * x * x * x);
    let t = inner.tanh();
    let d_inner = GELU_SCALE * (1.0 + 3.0 * GELU_COEF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Deterministic random stream (ChaCha8) with a Box–Muller normal sampler.
///
/// Identical seeds and call sequences give identical outputs on every
/// platform. Not shareable across threads; clone it explicitly if a second
/// independent stream with the same history is wanted.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
    spare_normal: Option<f64>,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare_normal: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    /// Uniform index in `0..n`.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    /// Standard normal draw.
    pub fn gaussian(&mut self) -> f64 {
        if let Some(z) = self.spare_normal.take() {
            return z;
        }
        // 1 - U keeps the log argument in (0, 1].
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = std::f64::consts::TAU * u2;
        self.spare_normal = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// In-place Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }
}

/// Central finite-difference gradient of `f` at `p`.
pub fn finite_difference_gradient<F>(mut f: F, p: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::numeric("finite-difference step must be positive"));
    }
    let mut probe = p.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe)?;
        probe[i] = orig - h;
        let minus = f(&probe)?;
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::numeric(format!(
                "objective is non-finite around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}
