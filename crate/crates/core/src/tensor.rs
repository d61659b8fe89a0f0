//! Dense linear-algebra kernels for the toy decoder and the eviction scorers.
//!
//! Everything here is plain row-major `f32` with no SIMD or tiling; the crate
//! cares about cache accounting and eviction behavior, not kernel speed.

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Matrix::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        self.data[i * self.cols + j] = v;
    }

    /// Column slice of every row: returns a `rows x (hi-lo)` copy.
    pub fn col_slice(&self, lo: usize, hi: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, hi - lo);
        for i in 0..self.rows {
            out.row_mut(i).copy_from_slice(&self.row(i)[lo..hi]);
        }
        out
    }

    /// Appends the rows of `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows > 0 && other.rows > 0 && self.cols != other.cols {
            return Err(Error::InvalidArgument("vstack column mismatch".into()));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Matrix::new(self.rows + other.rows, cols, data)
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::InvalidArgument(format!(
                "matmul shape mismatch: {}x{} * {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a = self.row(i);
            for (k, &aik) in a.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b = other.row(k);
                let o = out.row_mut(i);
                for j in 0..other.cols {
                    o[j] += aik * b[j];
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Inverse of a square matrix by Gauss-Jordan elimination with partial
/// pivoting, accumulated in f64. Used to construct embeddings whose
/// projections hit prescribed query/key targets.
pub fn invert(m: &Matrix) -> Result<Matrix> {
    if m.rows != m.cols || m.rows == 0 {
        return Err(Error::InvalidArgument(format!(
            "invert: matrix must be square and nonempty, got {}x{}",
            m.rows, m.cols
        )));
    }
    let n = m.rows;
    // augmented [A | I] in f64
    let mut a: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row: Vec<f64> = m.row(i).iter().map(|&v| v as f64).collect();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .expect("non-empty range");
        if a[pivot][col].abs() < 1e-12 {
            return Err(Error::InvalidArgument("invert: matrix is singular".into()));
        }
        a.swap(col, pivot);
        let p = a[col][col];
        for v in &mut a[col] {
            *v /= p;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = a[i][col];
            if f == 0.0 {
                continue;
            }
            for j in 0..2 * n {
                a[i][j] -= f * a[col][j];
            }
        }
    }
    let data = a.iter().flat_map(|row| row[n..].iter().map(|&v| v as f32)).collect();
    Matrix::new(n, n, data)
}

/// Numerically stabilized softmax applied to a slice in place.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Row-wise softmax with max-subtraction stabilization.
///
/// Each output row is nonnegative and sums to 1; ordering within a row is
/// preserved because `exp` is monotone.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    if m.rows == 0 || m.cols == 0 {
        return Err(Error::InvalidArgument("softmax_rows: empty matrix".into()));
    }
    let mut out = m.clone();
    for i in 0..out.rows {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Scaled dot-product attention: `softmax(Q K^T / sqrt(d)) V`.
///
/// With `causal_offset = Some(c)`, query row `i` may attend only keys with
/// index `<= c + i`. Masked logits are set to the most negative representable
/// value; after the stabilized softmax their weights underflow to exactly 0,
/// which we assert rather than renormalize.
pub fn scaled_dot_attention(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    causal_offset: Option<usize>,
) -> Result<Matrix> {
    if q.cols != k.cols {
        return Err(Error::InvalidArgument(format!(
            "attention dim mismatch: q cols {} vs k cols {}",
            q.cols, k.cols
        )));
    }
    if k.rows != v.rows {
        return Err(Error::InvalidArgument(format!(
            "attention key/value count mismatch: {} vs {}",
            k.rows, v.rows
        )));
    }
    if k.rows == 0 {
        return Err(Error::InvalidArgument("attention with empty key set".into()));
    }
    let scale = 1.0 / (k.cols as f32).sqrt();
    let mut out = Matrix::zeros(q.rows, v.cols);
    let mut logits = vec![0.0f32; k.rows];
    for i in 0..q.rows {
        let qi = q.row(i);
        let limit = causal_offset.map_or(k.rows, |c| (c + i + 1).min(k.rows));
        for j in 0..k.rows {
            if j < limit {
                let kj = k.row(j);
                let dot: f32 = qi.iter().zip(kj).map(|(a, b)| a * b).sum();
                logits[j] = dot * scale;
            } else {
                logits[j] = f32::MIN;
            }
        }
        softmax_in_place(&mut logits);
        for (j, &w) in logits.iter().enumerate() {
            if j >= limit {
                debug_assert_eq!(w, 0.0, "masked weight must be exactly zero");
                continue;
            }
            let vj = v.row(j);
            let o = out.row_mut(i);
            for (oc, &vc) in o.iter_mut().zip(vj) {
                *oc += w * vc;
            }
        }
    }
    Ok(out)
}

/// Rotary position encoding over coordinate pairs.
///
/// Pair `i` of a row at position `p` is rotated by `p / base^(2i/d)`.
/// Rotations are isometries, so row norms are preserved.
pub fn apply_rope(x: &Matrix, positions: &[usize], base: f32) -> Result<Matrix> {
    if x.cols % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "apply_rope requires even dimension, got {}",
            x.cols
        )));
    }
    if positions.len() != x.rows {
        return Err(Error::InvalidArgument(format!(
            "apply_rope positions length {} does not match {} rows",
            positions.len(),
            x.rows
        )));
    }
    let d = x.cols;
    let mut out = x.clone();
    for (i, &pos) in positions.iter().enumerate() {
        let row = out.row_mut(i);
        for pair in 0..d / 2 {
            let theta = pos as f32 / base.powf(2.0 * pair as f32 / d as f32);
            let (sin, cos) = theta.sin_cos();
            let a = row[2 * pair];
            let b = row[2 * pair + 1];
            row[2 * pair] = a * cos - b * sin;
            row[2 * pair + 1] = a * sin + b * cos;
        }
    }
    Ok(out)
}

/// Per-pair rotation applied to a single vector (helper for constructions that
/// need to pre-rotate a target direction).
pub fn rope_rotate_vec(v: &[f32], delta: f64, base: f32) -> Vec<f32> {
    let d = v.len();
    let mut out = v.to_vec();
    for pair in 0..d / 2 {
        let theta = delta / (base as f64).powf(2.0 * pair as f64 / d as f64);
        let (sin, cos) = (theta.sin() as f32, theta.cos() as f32);
        let a = out[2 * pair];
        let b = out[2 * pair + 1];
        out[2 * pair] = a * cos - b * sin;
        out[2 * pair + 1] = a * sin + b * cos;
    }
    out
}
