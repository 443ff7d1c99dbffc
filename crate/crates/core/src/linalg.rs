//! Dense vector kernels shared by every other module.
//!
//! Vectors are plain `[f64]` slices. The two invariant-carrying types are
//! [`UnitEmbedding`] (unit L2 norm) and [`Simplex`] (a probability vector).
//! Both deref to `[f64]` so they can be passed wherever a slice is expected.

use std::ops::Deref;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

/// Tolerance used when checking the unit-norm and simplex invariants.
pub const INVARIANT_TOL: f64 = 1e-9;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// A vector with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitEmbedding(Vec<f64>);

impl UnitEmbedding {
    /// Wraps `values` after checking `| ||values|| - 1 | <= 1e-9`.
    pub fn try_from_unit(values: Vec<f64>) -> Result<Self> {
        let n = norm(&values);
        if !n.is_finite() || (n - 1.0).abs() > INVARIANT_TOL {
            return Err(Error::contract(format!("expected unit norm, got {n}")));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

impl Deref for UnitEmbedding {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl AsRef<[f64]> for UnitEmbedding {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// A probability vector: nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct Simplex(Vec<f64>);

impl Simplex {
    pub fn try_new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::contract("empty simplex"));
        }
        if weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::contract("simplex weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > INVARIANT_TOL {
            return Err(Error::contract(format!("simplex weights sum to {total}")));
        }
        Ok(Self(weights))
    }

    pub fn weights(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Simplex {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Returns `v / ||v||`.
pub fn normalize(v: &[f64]) -> Result<UnitEmbedding> {
    if v.is_empty() {
        return Err(Error::degenerate("cannot normalize an empty vector"));
    }
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::degenerate(format!("cannot normalize vector of norm {n}")));
    }
    Ok(UnitEmbedding(v.iter().map(|x| x / n).collect()))
}

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
            return Err(Error::contract(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `A x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `Aᵀ y`
    pub fn matvec_t(&self, y: &[f64]) -> Vec<f64> {
        debug_assert_eq!(y.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, yr) in y.iter().enumerate() {
            axpy(*yr, self.row(r), &mut out);
        }
        out
    }

    /// `A += alpha * u vᵀ`
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (r, ur) in u.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            axpy(alpha * ur, v, row);
        }
    }
}

/// Jacobian of `v ↦ v/||v||`: `I/||v|| − v vᵀ/||v||³`.
pub fn normalize_jacobian(v: &[f64]) -> Result<Matrix> {
    let n = norm(v);
    if v.is_empty() || n == 0.0 || !n.is_finite() {
        return Err(Error::degenerate(format!(
            "normalization Jacobian undefined at norm {n}"
        )));
    }
    let d = v.len();
    let mut j = Matrix::identity(d);
    for x in j.data_mut() {
        *x /= n;
    }
    j.add_outer(-1.0 / (n * n * n), v, v);
    Ok(j)
}

/// Applies the (symmetric) normalization Jacobian at `v` to `g` without
/// materializing it: `(g − u (uᵀg)) / ||v||` with `u = v/||v||`.
pub fn normalize_vjp(v: &[f64], g: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if v.is_empty() || n == 0.0 || !n.is_finite() {
        return Err(Error::degenerate(format!(
            "normalization Jacobian undefined at norm {n}"
        )));
    }
    let ug = dot(v, g) / n;
    Ok(v.iter()
        .zip(g)
        .map(|(vi, gi)| (gi - vi / n * ug) / n)
        .collect())
}

/// `log Σ exp(s_j)`, shifted by the maximum so large entries do not overflow.
///
/// Panics on empty input.
pub fn log_sum_exp(s: &[f64]) -> f64 {
    assert!(!s.is_empty(), "log_sum_exp of an empty slice");
    let max = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let sum: f64 = s.iter().map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

/// Softmax of `scale * s`.
///
/// Panics on empty input.
pub fn softmax(s: &[f64], scale: f64) -> Simplex {
    Simplex(softmax_weights(s, scale))
}

pub(crate) fn softmax_weights(s: &[f64], scale: f64) -> Vec<f64> {
    assert!(!s.is_empty(), "softmax of an empty slice");
    let max = s
        .iter()
        .map(|x| scale * x)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut w: Vec<f64> = s.iter().map(|x| (scale * x - max).exp()).collect();
    let total: f64 = w.iter().sum();
    for x in &mut w {
        *x /= total;
    }
    w
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(p: &Simplex) -> f64 {
    -p.iter()
        .filter(|w| **w > 0.0)
        .map(|w| w * w.ln())
        .sum::<f64>()
}

/// Deterministic PRNG for `(seed, stream)`.
///
/// Distinct streams from the same seed are independent, so each stochastic
/// stage (initialization, shuffling, k-means seeding, ...) draws from its own
/// stream and adding draws in one stage never perturbs another.
pub fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Fixed stream identifiers.
pub mod streams {
    pub const CENTERS: u64 = 1;
    pub const MODEL: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const DATA: u64 = 4;
    pub const SPLIT: u64 = 5;
    pub const KMEANS: u64 = 6;
    pub const VERIFY: u64 = 7;
}
