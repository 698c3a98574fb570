//! Dense row-major matrices and the vector/operator norms used for slope
//! computation.
//!
//! The exact spectral norm goes through a cyclic Jacobi eigensolve of the
//! smaller Gram matrix. Classifier Jacobians are `n_classes x n_inputs` with
//! `n_classes` around 10, so the Gram matrix is tiny and the eigensolve is
//! essentially free. Power iteration is kept as an independent second route.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{self, Stream};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite entry in {0}")]
    NonFinite(&'static str),
    #[error("{method} did not converge after {iterations} iterations (residual {residual:e})")]
    NoConvergence {
        method: &'static str,
        iterations: usize,
        residual: f64,
    },
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Which p-norm to use. Only `1`, `2` and `inf` are supported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum PNorm {
    #[serde(rename = "1")]
    One,
    #[default]
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "inf")]
    Infinity,
}

impl PNorm {
    pub const ALL: [PNorm; 3] = [PNorm::One, PNorm::Two, PNorm::Infinity];
}

impl fmt::Display for PNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PNorm::One => f.write_str("1"),
            PNorm::Two => f.write_str("2"),
            PNorm::Infinity => f.write_str("inf"),
        }
    }
}

impl FromStr for PNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "1" | "one" => Ok(PNorm::One),
            "2" | "two" => Ok(PNorm::Two),
            "inf" | "infinity" | "max" => Ok(PNorm::Infinity),
            other => Err(format!("unsupported p-norm '{other}' (expected 1, 2 or inf)")),
        }
    }
}

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(LinalgError::Shape(format!("empty matrix {rows}x{cols}")));
        }
        if rows * cols != data.len() {
            return Err(LinalgError::Shape(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty matrix {rows}x{cols}");
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::diag(&vec![1.0; n])
    }

    pub fn diag(entries: &[f64]) -> Self {
        let n = entries.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in entries.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    /// Builds a matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(
            rows.iter().all(|r| r.len() == cols),
            "ragged rows passed to Matrix::from_rows"
        );
        let data = rows.iter().flatten().copied().collect();
        Self::new(rows.len(), cols, data).expect("non-empty rows")
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
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

    pub fn scaled(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * factor).collect(),
        }
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(LinalgError::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            self.rows,
            self.cols,
            other.cols,
            1.0,
            &self.data,
            Trans::No,
            &other.data,
            Trans::No,
            0.0,
            &mut out.data,
        );
        Ok(out)
    }

    /// `M x` with plain left-to-right accumulation per row.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(LinalgError::Shape(format!(
                "{}x{} matrix applied to vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), x)).collect())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Whether a gemm operand is read transposed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trans {
    No,
    Yes,
}

/// `C = alpha * op(A) * op(B) + beta * C` on row-major buffers, where
/// `op(A)` is `m x k` and `op(B)` is `k x n`.
///
/// A transposed operand is stored with the transposed shape, e.g. `A` is
/// `k x m` in memory when `ta == Trans::Yes`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: Trans,
    b: &[f64],
    tb: Trans,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: A has wrong length");
    assert_eq!(b.len(), k * n, "gemm: B has wrong length");
    assert_eq!(c.len(), m * n, "gemm: C has wrong length");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match ta {
        Trans::No => (k as isize, 1),
        Trans::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Trans::No => (n as isize, 1),
        Trans::Yes => (1, k as isize),
    };
    // SAFETY: the asserts above pin every buffer to exactly the extent implied
    // by its dimensions and strides, so all accesses stay in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Vector p-norm. `Infinity` is the max absolute entry; an empty slice has
/// norm zero.
pub fn vector_pnorm(x: &[f64], p: PNorm) -> f64 {
    match p {
        PNorm::One => x.iter().map(|v| v.abs()).sum(),
        PNorm::Two => x.iter().map(|v| v * v).sum::<f64>().sqrt(),
        PNorm::Infinity => x.iter().fold(0.0, |acc: f64, v| acc.max(v.abs())),
    }
}

/// Operator norm induced by the vector p-norm.
///
/// `p = 1` is the max absolute column sum, `p = inf` the max absolute row
/// sum, and `p = 2` the largest singular value via [`gram_spectral`].
pub fn matrix_opnorm(m: &Matrix, p: PNorm) -> Result<f64> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite("matrix"));
    }
    match p {
        PNorm::One => {
            let mut sums = vec![0.0; m.cols];
            for r in 0..m.rows {
                for (s, v) in sums.iter_mut().zip(m.row(r)) {
                    *s += v.abs();
                }
            }
            Ok(sums.into_iter().fold(0.0, f64::max))
        }
        PNorm::Infinity => Ok((0..m.rows)
            .map(|r| vector_pnorm(m.row(r), PNorm::One))
            .fold(0.0, f64::max)),
        PNorm::Two => gram_spectral(m),
    }
}

pub fn frobenius_norm(m: &Matrix) -> f64 {
    vector_pnorm(&m.data, PNorm::Two)
}

/// Gram matrix over the smaller dimension: `M M^T` if `rows <= cols`,
/// otherwise `M^T M`.
pub fn small_gram(m: &Matrix) -> Matrix {
    let (r, c) = m.shape();
    if r <= c {
        let mut g = Matrix::zeros(r, r);
        gemm(r, c, r, 1.0, &m.data, Trans::No, &m.data, Trans::Yes, 0.0, &mut g.data);
        g
    } else {
        let mut g = Matrix::zeros(c, c);
        gemm(c, r, c, 1.0, &m.data, Trans::Yes, &m.data, Trans::No, 0.0, &mut g.data);
        g
    }
}

/// Exact spectral norm: `sqrt(lambda_max)` of the smaller Gram matrix.
pub fn gram_spectral(m: &Matrix) -> Result<f64> {
    if !m.is_finite() {
        return Err(LinalgError::NonFinite("matrix"));
    }
    let gram = small_gram(m);
    let eig = symmetric_eigenvalues(&gram)?;
    let lambda_max = eig.into_iter().fold(0.0, f64::max);
    Ok(lambda_max.max(0.0).sqrt())
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, in the
/// order they sit on the diagonal after convergence (unsorted).
pub fn symmetric_eigenvalues(a: &Matrix) -> Result<Vec<f64>> {
    let n = a.rows;
    if a.cols != n {
        return Err(LinalgError::Shape(format!(
            "eigensolve needs a square matrix, got {}x{}",
            a.rows, a.cols
        )));
    }
    if !a.is_finite() {
        return Err(LinalgError::NonFinite("symmetric matrix"));
    }
    let mut w = a.data.clone();
    let scale = vector_pnorm(&w, PNorm::Two);
    if scale == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let off_norm = |w: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += w[i * n + j] * w[i * n + j];
                }
            }
        }
        s.sqrt()
    };

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_norm(&w) <= 1e-15 * scale {
            return Ok((0..n).map(|i| w[i * n + i]).collect());
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w[p * n + q];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = w[p * n + p];
                let aqq = w[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = w[k * n + p];
                    let akq = w[k * n + q];
                    w[k * n + p] = c * akp - s * akq;
                    w[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = w[p * n + k];
                    let aqk = w[q * n + k];
                    w[p * n + k] = c * apk - s * aqk;
                    w[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let residual = off_norm(&w);
    if residual <= 1e-12 * scale {
        return Ok((0..n).map(|i| w[i * n + i]).collect());
    }
    Err(LinalgError::NoConvergence {
        method: "jacobi eigensolve",
        iterations: JACOBI_MAX_SWEEPS,
        residual,
    })
}

/// Settings for the power-iteration spectral norm.
#[derive(Debug, Clone, Copy)]
pub struct PowerIteration {
    /// Relative change of the Rayleigh quotient at which to stop.
    pub tolerance: f64,
    pub max_iterations: usize,
    pub seed: u64,
}

impl Default for PowerIteration {
    fn default() -> Self {
        Self {
            tolerance: 1e-10,
            max_iterations: 10_000,
            seed: 0x5eed,
        }
    }
}

impl PowerIteration {
    /// Spectral norm by power iteration on the smaller Gram matrix.
    pub fn spectral_norm(&self, m: &Matrix) -> Result<f64> {
        if !m.is_finite() {
            return Err(LinalgError::NonFinite("matrix"));
        }
        let g = small_gram(m);
        let n = g.rows;
        let mut rng = rng::seeded(self.seed, Stream::PowerIteration);
        let mut v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = vector_pnorm(&v, PNorm::Two);
        v.iter_mut().for_each(|x| *x /= norm);

        let mut lambda = 0.0;
        for it in 0..self.max_iterations {
            let w = g.matvec(&v)?;
            let next = dot(&v, &w);
            let wn = vector_pnorm(&w, PNorm::Two);
            if wn == 0.0 {
                return Ok(0.0);
            }
            let converged = it > 0 && (next - lambda).abs() <= self.tolerance * next.abs();
            lambda = next;
            v = w.into_iter().map(|x| x / wn).collect();
            if converged {
                return Ok(lambda.max(0.0).sqrt());
            }
        }
        let gv = g.matvec(&v)?;
        let residual = vector_pnorm(
            &gv.iter().zip(&v).map(|(a, b)| a - lambda * b).collect::<Vec<_>>(),
            PNorm::Two,
        );
        Err(LinalgError::NoConvergence {
            method: "power iteration",
            iterations: self.max_iterations,
            residual,
        })
    }
}
