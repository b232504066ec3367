//! Dense numeric kernels used by the inference engine.
//!
//! Everything is `f64` row-major. Weight files may store `f32`, but all
//! arithmetic in the toolkit happens at double precision.

use crate::error::{Error, Result};

/// Row-major dense matrix. Construction validates that every entry is finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "matrix entry {bad} is not finite: {}",
                data[bad]
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

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

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

/// `a @ b`; inner dimensions must agree.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "matmul {}x{} @ {}x{}: inner dimensions differ",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let arow = a.row(i);
        let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in arow.iter().enumerate() {
            let brow = b.row(k);
            for (j, &bkj) in brow.iter().enumerate() {
                orow[j] += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `m @ v` for a column vector `v`.
pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vec<f64>> {
    if m.cols != v.len() {
        return Err(Error::Shape(format!(
            "matvec {}x{} @ len-{} vector",
            m.rows,
            m.cols,
            v.len()
        )));
    }
    let mut out = vec![0.0; m.rows];
    for i in 0..m.rows {
        out[i] = dot(m.row(i), v);
    }
    Ok(out)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Row softmax with masking support.
///
/// Entries must be finite or `-inf`; masked (`-inf`) entries map to exactly
/// zero. The maximum finite entry is subtracted before exponentiation, which
/// also makes the result invariant to adding a constant to all finite
/// entries. A row with no finite entry is degenerate.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>> {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v.is_nan() || v == f64::INFINITY {
            return Err(Error::Validation(format!(
                "softmax input must be finite or -inf, got {v}"
            )));
        }
        if v > max {
            max = v;
        }
    }
    if max == f64::NEG_INFINITY {
        return Err(Error::DegenerateRow("all entries are -inf".into()));
    }
    let mut out = vec![0.0; row.len()];
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        // exp(-inf - max) is exactly 0.0, so masked entries stay zero.
        *o = (v - max).exp();
        sum += *o;
    }
    for o in &mut out {
        *o /= sum;
    }
    Ok(out)
}

/// Log-softmax over a finite row (used for token log-probabilities).
pub fn log_softmax(row: &[f64]) -> Result<Vec<f64>> {
    let probs = softmax(row)?;
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    let _ = probs;
    Ok(row.iter().map(|&v| v - log_z).collect())
}

/// RMS normalization: `out[i] = gain[i] * v[i] / sqrt(mean(v^2) + eps)`.
pub fn rms_norm(v: &[f64], gain: &[f64], eps: f64) -> Result<Vec<f64>> {
    if v.len() != gain.len() {
        return Err(Error::Shape(format!(
            "rms_norm: vector len {} vs gain len {}",
            v.len(),
            gain.len()
        )));
    }
    if v.is_empty() {
        return Err(Error::Shape("rms_norm: empty vector".into()));
    }
    let mean_sq = dot(v, v) / v.len() as f64;
    let denom = (mean_sq + eps).sqrt();
    if denom == 0.0 {
        return Err(Error::Validation(
            "rms_norm: zero vector with eps = 0".into(),
        ));
    }
    Ok(v.iter().zip(gain).map(|(x, g)| g * x / denom).collect())
}

// ---------------------------------------------------------------------------
