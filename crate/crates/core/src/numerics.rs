//! Small dense linear algebra and probability helpers.
//!
//! All training math runs in `f64`. Lower precisions only appear at the
//! serialization boundaries (`wire` and `datastore`).

use crate::error::{Error, Result};

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::mismatch(
                rows * cols,
                data.len(),
                "matrix data length",
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::mismatch(cols, r.len(), "ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::mismatch(
                self.cols,
                other.rows,
                "matmul inner dimension",
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product `self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::mismatch(self.cols, x.len(), "matvec"));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Temperature softmax with max subtraction.
pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidInput(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if logits.is_empty() {
        return Err(Error::Empty("softmax of empty logits".into()));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite logit".into()));
    }
    Ok(softmax_unchecked(logits, temperature))
}

pub(crate) fn softmax_unchecked(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Log-softmax with temperature, via log-sum-exp.
pub(crate) fn log_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits
        .iter()
        .map(|l| ((l - max) / temperature).exp())
        .sum::<f64>()
        .ln();
    logits
        .iter()
        .map(|l| (l - max) / temperature - lse)
        .collect()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::mismatch(a.len(), b.len(), "cosine similarity"));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "zero-norm vector in cosine similarity".into(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(a, b)` with respect to `a`, given the precomputed cosine.
pub(crate) fn cosine_grad_a(a: &[f64], b: &[f64], cos: f64) -> Vec<f64> {
    let na = norm(a);
    let nb = norm(b);
    a.iter()
        .zip(b)
        .map(|(ai, bi)| bi / (na * nb) - cos * ai / (na * na))
        .collect()
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|v| v * v.ln())
        .sum::<f64>()
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maximum relative error between an analytic gradient and central finite
/// differences of `f`.
///
/// `f` follows the value-plus-gradient contract used by every loss in this
/// crate: it returns the objective and its gradient with respect to `theta`.
/// The relative error per coordinate is `|a - fd| / max(1, |a|)`.
pub fn grad_check<F>(f: F, theta: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidInput(format!(
            "step must be positive, got {h}"
        )));
    }
    let (_, analytic) = f(theta)?;
    if analytic.len() != theta.len() {
        return Err(Error::mismatch(
            theta.len(),
            analytic.len(),
            "gradient length",
        ));
    }
    let mut probe = theta.to_vec();
    let mut worst = 0.0f64;
    for i in 0..theta.len() {
        probe[i] = theta[i] + h;
        let (plus, _) = f(&probe)?;
        probe[i] = theta[i] - h;
        let (minus, _) = f(&probe)?;
        probe[i] = theta[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::CheckFailed { index: i });
        }
        let fd = (plus - minus) / (2.0 * h);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Orthonormal factor of a square matrix by modified Gram-Schmidt.
///
/// The implied `R` has a positive diagonal, so applied to a standard normal
/// matrix this yields a Haar-distributed orthogonal matrix.
pub fn orthonormal_factor(m: &Matrix) -> Result<Matrix> {
    if m.rows != m.cols {
        return Err(Error::mismatch(m.rows, m.cols, "QR of non-square matrix"));
    }
    let n = m.rows;
    // Work on columns.
    let mut cols: Vec<Vec<f64>> = (0..n)
        .map(|c| (0..n).map(|r| m.get(r, c)).collect())
        .collect();
    for j in 0..n {
        for k in 0..j {
            let (done, rest) = cols.split_at_mut(j);
            let proj = dot(&done[k], &rest[0]);
            for (v, q) in rest[0].iter_mut().zip(&done[k]) {
                *v -= proj * q;
            }
        }
        let nrm = norm(&cols[j]);
        if nrm < 1e-12 {
            return Err(Error::Degenerate("rank-deficient matrix in QR".into()));
        }
        cols[j].iter_mut().for_each(|v| *v /= nrm);
    }
    let mut q = Matrix::zeros(n, n);
    for (c, col) in cols.iter().enumerate() {
        for (r, v) in col.iter().enumerate() {
            q.set(r, c, *v);
        }
    }
    Ok(q)
}
