//! Dense row-major f64 matrices and the pure forward kernels.
//!
//! Everything in the model is a 2-D matrix; vectors are 1xN. The functions
//! here are pure and allocation-per-call; the tape in [`super::tape`] records
//! them for reverse-mode differentiation.

use crate::error::{HierformError, Result};
use rand::Rng;

/// Dense matrix, row-major, 64-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(HierformError::DataLength {
                rows,
                cols,
                got: data.len(),
            });
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

    /// Identity-like: ones on the main diagonal, zero elsewhere.
    pub fn eye(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(HierformError::DataLength {
                    rows: r,
                    cols: c,
                    got: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Matrix::new(r, c, data)
    }

    /// Uniform entries in (-limit, limit), deterministic for a given RNG state.
    pub fn uniform<R: Rng>(rows: usize, cols: usize, limit: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols)
            .map(|_| rng.gen_range(-limit..limit))
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

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    fn shape_err(op: &'static str, a: &Matrix, b: &Matrix) -> HierformError {
        HierformError::ShapeMismatch {
            op,
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        }
    }
}

/// Standard product `a @ b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Matrix::shape_err("matmul", a, b));
    }
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        for p in 0..k {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

/// `a @ b^T`, with `a` m-by-k and `b` n-by-k.
pub fn matmul_tb(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.cols {
        return Err(Matrix::shape_err("matmul_tb", a, b));
    }
    let (m, k, n) = (a.rows, a.cols, b.rows);
    let mut out = Matrix::zeros(m, n);
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b.data[j * k..(j + 1) * k];
            out.data[i * n + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

/// `a^T @ b`, with `a` k-by-m and `b` k-by-n.
pub fn matmul_ta(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows != b.rows {
        return Err(Matrix::shape_err("matmul_ta", a, b));
    }
    let (k, m, n) = (a.rows, a.cols, b.cols);
    let mut out = Matrix::zeros(m, n);
    for p in 0..k {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let av = arow[i];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(out)
}

pub fn add(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Matrix::shape_err("add", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Matrix::new(a.rows, a.cols, data)
}

/// Adds a 1-by-cols bias row to every row of `x`.
pub fn add_bias(x: &Matrix, bias: &Matrix) -> Result<Matrix> {
    if bias.rows != 1 || bias.cols != x.cols {
        return Err(Matrix::shape_err("add_bias", x, bias));
    }
    let mut out = x.clone();
    for r in 0..out.rows {
        let row = &mut out.data[r * out.cols..(r + 1) * out.cols];
        for (o, b) in row.iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

pub fn scale(x: &Matrix, factor: f64) -> Matrix {
    let data = x.data.iter().map(|v| v * factor).collect();
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data,
    }
}

/// Elementwise product.
pub fn hadamard(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(Matrix::shape_err("hadamard", a, b));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect();
    Matrix::new(a.rows, a.cols, data)
}

pub fn relu(x: &Matrix) -> Matrix {
    let data = x.data.iter().map(|v| v.max(0.0)).collect();
    Matrix {
        rows: x.rows,
        cols: x.cols,
        data,
    }
}

pub fn sum_all(x: &Matrix) -> f64 {
    x.data.iter().sum()
}

/// Row-wise softmax where masked columns receive exactly zero mass.
///
/// Masking acts on the logits (a masked column is treated as -inf), so the
/// unmasked probabilities are identical to a softmax computed over the
/// unmasked columns alone. Stabilized by subtracting the unmasked row max.
pub fn masked_softmax(logits: &Matrix, mask: &[bool]) -> Result<Matrix> {
    if mask.len() != logits.cols {
        return Err(HierformError::InvalidParam {
            name: "mask",
            reason: format!(
                "length {} does not match {} columns",
                mask.len(),
                logits.cols
            ),
        });
    }
    if !mask.iter().any(|&m| m) {
        return Err(HierformError::DegenerateMask);
    }
    let mut out = Matrix::zeros(logits.rows, logits.cols);
    for r in 0..logits.rows {
        let row = logits.row(r);
        let max = row
            .iter()
            .zip(mask)
            .filter(|(_, &m)| m)
            .map(|(v, _)| *v)
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..logits.cols {
            if mask[c] {
                let e = (row[c] - max).exp();
                out.data[r * logits.cols + c] = e;
                denom += e;
            }
        }
        for c in 0..logits.cols {
            if mask[c] {
                out.data[r * logits.cols + c] /= denom;
            }
        }
    }
    Ok(out)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Per-row layer normalization: `gamma * (x - mean) / sqrt(var + eps) + beta`.
///
/// Variance is the population variance of the row.
pub fn layer_norm(x: &Matrix, gamma: &Matrix, beta: &Matrix, eps: f64) -> Result<Matrix> {
    if gamma.rows != 1 || gamma.cols != x.cols {
        return Err(Matrix::shape_err("layer_norm(gamma)", x, gamma));
    }
    if beta.rows != 1 || beta.cols != x.cols {
        return Err(Matrix::shape_err("layer_norm(beta)", x, beta));
    }
    let n = x.cols as f64;
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv_sigma = 1.0 / (var + eps).sqrt();
        for c in 0..x.cols {
            let xhat = (row[c] - mean) * inv_sigma;
            out.data[r * x.cols + c] = gamma.data[c] * xhat + beta.data[c];
        }
    }
    Ok(out)
}

/// Average pooling over rows with window and stride `m`.
///
/// Output has ceil(T/m) rows; a trailing partial window is averaged over the
/// rows it actually contains, so constant inputs stay constant.
pub fn avg_pool_rows(x: &Matrix, m: usize) -> Result<Matrix> {
    if m < 1 {
        return Err(HierformError::InvalidParam {
            name: "m",
            reason: "pooling window must be at least 1".into(),
        });
    }
    let valid = vec![true; x.rows];
    masked_avg_pool_rows(x, m, &valid)
}

/// Masked variant of [`avg_pool_rows`]: each output row averages only the
/// valid rows of its window. A window with no valid rows yields a zero row.
pub fn masked_avg_pool_rows(x: &Matrix, m: usize, valid: &[bool]) -> Result<Matrix> {
    if m < 1 {
        return Err(HierformError::InvalidParam {
            name: "m",
            reason: "pooling window must be at least 1".into(),
        });
    }
    if valid.len() != x.rows {
        return Err(HierformError::InvalidParam {
            name: "valid",
            reason: format!("length {} does not match {} rows", valid.len(), x.rows),
        });
    }
    let out_rows = x.rows.div_ceil(m);
    let mut out = Matrix::zeros(out_rows, x.cols);
    for k in 0..out_rows {
        let lo = k * m;
        let hi = ((k + 1) * m).min(x.rows);
        let count = (lo..hi).filter(|&r| valid[r]).count();
        if count == 0 {
            continue;
        }
        for r in lo..hi {
            if !valid[r] {
                continue;
            }
            let row = x.row(r);
            let orow = &mut out.data[k * x.cols..(k + 1) * x.cols];
            for (o, v) in orow.iter_mut().zip(row) {
                *o += v / count as f64;
            }
        }
    }
    Ok(out)
}

/// Mean over the valid rows, producing a 1-by-cols matrix.
pub fn mean_rows(x: &Matrix, valid: &[bool]) -> Result<Matrix> {
    if valid.len() != x.rows {
        return Err(HierformError::InvalidParam {
            name: "valid",
            reason: format!("length {} does not match {} rows", valid.len(), x.rows),
        });
    }
    let count = valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return Err(HierformError::InvalidParam {
            name: "valid",
            reason: "mean over zero valid rows".into(),
        });
    }
    let mut out = Matrix::zeros(1, x.cols);
    for r in 0..x.rows {
        if !valid[r] {
            continue;
        }
        for (o, v) in out.data.iter_mut().zip(x.row(r)) {
            *o += v / count as f64;
        }
    }
    Ok(out)
}

/// Gathers rows of `x` by index; `None` slots become zero rows (padding).
pub fn gather_rows(x: &Matrix, slots: &[Option<usize>]) -> Result<Matrix> {
    let mut out = Matrix::zeros(slots.len(), x.cols);
    for (s, slot) in slots.iter().enumerate() {
        if let Some(r) = slot {
            if *r >= x.rows {
                return Err(HierformError::Usage(format!(
                    "gather index {} out of range for {} rows",
                    r, x.rows
                )));
            }
            out.data[s * x.cols..(s + 1) * x.cols].copy_from_slice(x.row(*r));
        }
    }
    Ok(out)
}

pub fn concat_rows(parts: &[&Matrix]) -> Result<Matrix> {
    let cols = parts
        .first()
        .ok_or_else(|| HierformError::Usage("concat_rows of zero matrices".into()))?
        .cols;
    let rows = parts.iter().map(|p| p.rows).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for p in parts {
        if p.cols != cols {
            return Err(Matrix::shape_err("concat_rows", parts[0], p));
        }
        data.extend_from_slice(&p.data);
    }
    Matrix::new(rows, cols, data)
}

pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
    let rows = parts
        .first()
        .ok_or_else(|| HierformError::Usage("concat_cols of zero matrices".into()))?
        .rows;
    let cols: usize = parts.iter().map(|p| p.cols).sum();
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let mut offset = 0;
        for p in parts {
            if p.rows != rows {
                return Err(Matrix::shape_err("concat_cols", parts[0], p));
            }
            out.data[r * cols + offset..r * cols + offset + p.cols].copy_from_slice(p.row(r));
            offset += p.cols;
        }
    }
    Ok(out)
}
