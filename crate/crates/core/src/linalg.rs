//! Minimal dense linear algebra: row-major f64 matrices, L2 normalization,
//! matrix products, and power-iteration PCA.
//!
//! Everything here is 64-bit and deterministic; no threading, no BLAS.

use crate::error::{Error, Result};

/// Norms below this are treated as zero (degenerate embedding).
pub const EPS_NORM: f64 = 1e-12;

/// Dense row-major matrix of f64 values.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    /// All-zero matrix.
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    /// Build from row-major data. Length and finiteness are checked.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("matrix entry at flat index {pos}"),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Identity matrix of size n.
    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Borrow row `r` as a slice.
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }
}

/// Standard matrix product `a * b`.
///
/// Accumulation runs in a fixed i-k-j order so results are identical from
/// run to run.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            context: "matmul",
            left: (a.rows, a.cols),
            right: (b.rows, b.cols),
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let out_row = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let b_row = &b.data[k * b.cols..(k + 1) * b.cols];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// Euclidean norm.
pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Dot product. Panics on length mismatch (internal use on checked shapes).
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Scale `v` to unit Euclidean norm.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !n.is_finite() {
        return Err(Error::NonFinite {
            context: "l2_normalize input".to_string(),
        });
    }
    if n < EPS_NORM {
        return Err(Error::ZeroNorm {
            context: format!("vector of dim {} with norm {n:e}", v.len()),
        });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Project mean-centered `points` (one point per row) onto their top
/// `out_dim` principal directions, found by power iteration with deflation.
///
/// The start vector is all-ones (normalized), so the result is fully
/// deterministic. Each component's sign is fixed by making its first
/// nonzero entry positive. Zero-variance input yields an all-zero
/// projection rather than an error.
pub fn pca_project(points: &DenseMatrix, out_dim: usize, iters: usize) -> Result<DenseMatrix> {
    let (n, d) = (points.rows, points.cols);
    if out_dim > d {
        return Err(Error::InvalidArgument(format!(
            "pca out_dim {out_dim} exceeds point dimension {d}"
        )));
    }
    if iters == 0 {
        return Err(Error::InvalidArgument("pca iters must be >= 1".to_string()));
    }
    let mut out = DenseMatrix::zeros(n, out_dim);
    if n == 0 || out_dim == 0 {
        return Ok(out);
    }

    // Mean-center.
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(points.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    let mut centered = Vec::with_capacity(n * d);
    for r in 0..n {
        for (v, m) in points.row(r).iter().zip(&mean) {
            centered.push(v - m);
        }
    }

    // Scatter matrix C = Xc^T Xc (d x d, symmetric PSD).
    let mut scatter = vec![0.0; d * d];
    for r in 0..n {
        let row = &centered[r * d..(r + 1) * d];
        for i in 0..d {
            for j in 0..d {
                scatter[i * d + j] += row[i] * row[j];
            }
        }
    }
    let fro0 = norm(&scatter);
    if fro0 < 1e-300 {
        // All points identical: zero variance, zero projection.
        return Ok(out);
    }

    let mat_vec = |m: &[f64], v: &[f64]| -> Vec<f64> {
        (0..d).map(|i| dot(&m[i * d..(i + 1) * d], v)).collect()
    };

    let mut lead_eigenvalue = f64::NAN;
    for comp in 0..out_dim {
        if norm(&scatter) < 1e-12 * fro0 {
            // Remaining variance is numerically exhausted; leave zero columns.
            break;
        }
        let mut v = vec![1.0 / (d as f64).sqrt(); d];
        // The all-ones start can be orthogonal to every remaining direction;
        // fall back to the dominant coordinate axis in that case.
        if norm(&mat_vec(&scatter, &v)) < 1e-12 * fro0 {
            let axis = (0..d)
                .max_by(|&a, &b| {
                    scatter[a * d + a]
                        .partial_cmp(&scatter[b * d + b])
                        .unwrap()
                })
                .unwrap();
            v = vec![0.0; d];
            v[axis] = 1.0;
        }
        for _ in 0..iters {
            let w = mat_vec(&scatter, &v);
            let wn = norm(&w);
            if wn < 1e-300 {
                break;
            }
            for (vi, wi) in v.iter_mut().zip(&w) {
                *vi = wi / wn;
            }
        }
        let eigenvalue = dot(&v, &mat_vec(&scatter, &v));
        if comp == 0 {
            lead_eigenvalue = eigenvalue;
        } else if eigenvalue < 1e-12 * lead_eigenvalue {
            break;
        }
        // Sign convention: first nonzero entry positive.
        if let Some(first) = v.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for vi in &mut v {
                    *vi = -*vi;
                }
            }
        }
        for r in 0..n {
            out.data[r * out_dim + comp] = dot(&centered[r * d..(r + 1) * d], &v);
        }
        // Deflate.
        for i in 0..d {
            for j in 0..d {
                scatter[i * d + j] -= eigenvalue * v[i] * v[j];
            }
        }
    }
    Ok(out)
}
