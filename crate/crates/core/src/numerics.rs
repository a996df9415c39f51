//! Dense row-major kernels, similarity functions and a central-difference
//! gradient oracle.
//!
//! Everything here is 64-bit. Every operation checks shapes up front and
//! returns [`Error::Shape`] instead of panicking.

use std::ops::{Deref, DerefMut};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite matrix entry at index {i}")));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Matrix::from_vec(rows.len(), cols, rows.concat())
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Matrix { rows, cols, data }
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, and a 0-column matrix still has `rows` rows.
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_shape(&self, rows: usize, cols: usize, what: &str) -> Result<()> {
        if self.shape() != (rows, cols) {
            return Err(Error::shape(format!(
                "{what}: expected {rows}x{cols}, got {}x{}",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> Result<f64> {
        self.ensure_shape(other.rows, other.cols, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// FNV-1a over the IEEE bit patterns (shape included). Equal checksums
    /// for bitwise-equal matrices.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        h.write_u64(self.rows as u64);
        h.write_u64(self.cols as u64);
        for v in &self.data {
            h.write_u64(v.to_bits());
        }
        h.finish()
    }
}

/// Dense real vector.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Vector(pub Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

pub(crate) struct Fnv(u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= u64::from(b);
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub(crate) fn finish(&self) -> u64 {
        self.0
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul: {}x{} times {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            for (o, bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// Row-vector times matrix: `out = x · m`. Panics on shape mismatch; callers
/// validate shapes once at the API boundary.
#[inline]
pub(crate) fn vecmat_into(x: &[f64], m: &Matrix, out: &mut [f64]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(out.len(), m.cols);
    out.iter_mut().for_each(|o| *o = 0.0);
    for (k, &xk) in x.iter().enumerate() {
        if xk == 0.0 {
            continue;
        }
        for (o, w) in out.iter_mut().zip(m.row(k)) {
            *o += xk * w;
        }
    }
}

/// `out = m · y` where `m` is rows x cols and `y` has `cols` entries, i.e. the
/// row-vector product with `mᵀ`.
#[inline]
pub(crate) fn matvec_into(m: &Matrix, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(y.len(), m.cols);
    debug_assert_eq!(out.len(), m.rows);
    for (r, o) in out.iter_mut().enumerate() {
        *o = dot(m.row(r), y);
    }
}

/// `m += alpha · xᵀ y` (outer-product accumulate).
#[inline]
pub(crate) fn add_outer(m: &mut Matrix, alpha: f64, x: &[f64], y: &[f64]) {
    debug_assert_eq!(x.len(), m.rows);
    debug_assert_eq!(y.len(), m.cols);
    for (r, &xr) in x.iter().enumerate() {
        let a = alpha * xr;
        if a == 0.0 {
            continue;
        }
        for (w, yc) in m.row_mut(r).iter_mut().zip(y) {
            *w += a * yc;
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to [-1, 1].
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(format!(
            "cosine_sim: dims {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (l2_norm(a), l2_norm(b));
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return Err(Error::DegenerateVector(
            "cosine similarity of a zero-norm vector".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Each row divided by its L2 norm. Zero rows are rejected.
pub fn row_l2_normalize(m: &Matrix) -> Result<Matrix> {
    let mut out = m.clone();
    for r in 0..out.rows {
        let row = out.row_mut(r);
        let n = l2_norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::DegenerateVector(format!("row {r} has zero norm")));
        }
        row.iter_mut().for_each(|v| *v /= n);
    }
    Ok(out)
}

/// Neumaier-compensated running sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// Central-difference gradient of `loss` at `at`, entry by entry.
pub fn finite_diff_grad<F>(loss: F, at: &Matrix, step: f64) -> Result<Matrix>
where
    F: Fn(&Matrix) -> f64,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::Numeric(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut probe = at.clone();
    let mut grad = Matrix::zeros(at.rows, at.cols);
    for i in 0..at.data.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + step;
        let plus = loss(&probe);
        probe.data[i] = orig - step;
        let minus = loss(&probe);
        probe.data[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is not finite near entry {i} (f+ = {plus}, f- = {minus})"
            )));
        }
        grad.data[i] = (plus - minus) / (2.0 * step);
    }
    Ok(grad)
}
