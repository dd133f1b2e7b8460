//! Dense 64-bit linear algebra and the seeded randomness everything else is built on.
//!
//! Nothing here is tuned for speed. Matrices are row-major and immutable once built; the
//! spectral-norm oracle deliberately forms the Gram matrix and diagonalizes it with cyclic
//! Jacobi rotations so that it shares no code path with the power iteration it checks.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Default relative tolerance for [`spectral_norm_oracle`].
pub const ORACLE_TOL: f64 = 1e-10;
/// Sweep cap for the Jacobi eigen-iteration.
pub const ORACLE_MAX_SWEEPS: usize = 10_000;

/// Row-major dense matrix of finite `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                op: "Matrix::new",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. All rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::DimensionMismatch {
                    op: "Matrix::from_rows",
                    expected: cols,
                    actual: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(rows.len(), cols, data)
    }

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

    /// Matrix with i.i.d. standard normal entries.
    pub fn gaussian(rows: usize, cols: usize, rng: &mut Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.standard_normal()).collect();
        Self { rows, cols, data }
    }

    /// `rows × k` matrix with orthonormal columns spanning a uniformly random subspace
    /// (modified Gram–Schmidt on a Gaussian draw).
    pub fn random_orthonormal(rows: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if k > rows {
            return Err(invalid(format!(
                "cannot fit {k} orthonormal columns in dimension {rows}"
            )));
        }
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(k);
        while cols.len() < k {
            let mut c: Vec<f64> = (0..rows).map(|_| rng.standard_normal()).collect();
            for prev in &cols {
                let p = dot(&c, prev);
                c.iter_mut().zip(prev).for_each(|(x, y)| *x -= p * y);
            }
            let n = norm(&c);
            // Redraw on (numerically) dependent columns.
            if n < 1e-8 {
                continue;
            }
            c.iter_mut().for_each(|x| *x /= n);
            cols.push(c);
        }
        let mut m = Self::zeros(rows, k);
        for (j, c) in cols.iter().enumerate() {
            for (i, x) in c.iter().enumerate() {
                m.data[i * k + j] = *x;
            }
        }
        Ok(m)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::DimensionMismatch {
                op: "matmul",
                expected: self.cols,
                actual: other.rows,
            });
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                out_row.iter_mut().zip(b_row).for_each(|(o, b)| *o += a * b);
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ` without materializing the transpose.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::DimensionMismatch {
                op: "matmul_t",
                expected: self.cols,
                actual: other.cols,
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    pub fn scaled(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    /// Columns `start..end` as a new matrix.
    pub fn column_block(&self, start: usize, end: usize) -> Result<Matrix> {
        if start > end || end > self.cols {
            return Err(invalid(format!(
                "column block {start}..{end} out of range for {} columns",
                self.cols
            )));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(self.rows * w);
        for i in 0..self.rows {
            data.extend_from_slice(&self.data[i * self.cols + start..i * self.cols + end]);
        }
        Ok(Matrix {
            rows: self.rows,
            cols: w,
            data,
        })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }
}

/// Dense vector of finite `f64` entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { data })
    }

    pub fn zeros(len: usize) -> Self {
        Self {
            data: vec![0.0; len],
        }
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self { data }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn scaled(&self, s: f64) -> Vector {
        Vector {
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.data
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Seed-reproducible random stream.
///
/// Parallel work uses one stream per task, seeded `base_seed + task_index`.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent stream `index` derived from `base_seed`.
    pub fn stream(base_seed: u64, index: u64) -> Self {
        Self::new(base_seed.wrapping_add(index))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform draw from `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `y = A x`.
pub fn matvec(a: &Matrix, x: &Vector) -> Result<Vector> {
    if a.cols != x.len() {
        return Err(Error::DimensionMismatch {
            op: "matvec",
            expected: a.cols,
            actual: x.len(),
        });
    }
    let data = (0..a.rows).map(|i| dot(a.row(i), &x.data)).collect();
    Ok(Vector { data })
}

/// `x = Aᵀ y`, computed from the row-major `A` without transposing it.
pub fn matvec_t(a: &Matrix, y: &Vector) -> Result<Vector> {
    if a.rows != y.len() {
        return Err(Error::DimensionMismatch {
            op: "matvec_t",
            expected: a.rows,
            actual: y.len(),
        });
    }
    let mut out = vec![0.0; a.cols];
    for (i, yi) in y.data.iter().enumerate() {
        if *yi == 0.0 {
            continue;
        }
        out.iter_mut()
            .zip(a.row(i))
            .for_each(|(o, aij)| *o += aij * yi);
    }
    Ok(Vector { data: out })
}

/// Largest singular value of `a`, by explicit Gram matrix and cyclic Jacobi.
///
/// The Gram matrix is `AᵀA` or `AAᵀ`, whichever is smaller. Jacobi sweeps run until the
/// off-diagonal Frobenius mass drops below `tol` times the total Frobenius norm of the
/// Gram matrix. This is the expensive reference the implicit power iteration is checked
/// against; do not use it on hot paths.
pub fn spectral_norm_oracle(a: &Matrix, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(invalid("oracle tolerance must be positive"));
    }
    if a.rows == 0 || a.cols == 0 {
        return Ok(0.0);
    }
    let gram = if a.cols <= a.rows {
        a.transpose().matmul(a)?
    } else {
        a.matmul_t(a)?
    };
    let lambda = jacobi_max_eigenvalue(gram, tol, ORACLE_MAX_SWEEPS)
        .map_err(|e| match e {
            Error::NotConverged {
                iterations,
                estimate,
            } => Error::NotConverged {
                iterations,
                estimate: estimate.max(0.0).sqrt(),
            },
            other => other,
        })?;
    Ok(lambda.max(0.0).sqrt())
}

fn jacobi_max_eigenvalue(mut g: Matrix, tol: f64, max_sweeps: usize) -> Result<f64> {
    let n = g.rows;
    let total = g.frobenius_norm();
    if total == 0.0 {
        return Ok(0.0);
    }
    let off = |g: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += g.get(i, j) * g.get(i, j);
                }
            }
        }
        s.sqrt()
    };
    let max_diag = |g: &Matrix| (0..n).map(|i| g.get(i, i)).fold(f64::MIN, f64::max);

    for _ in 0..max_sweeps {
        if off(&g) <= tol * total {
            return Ok(max_diag(&g));
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = g.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = g.get(p, p);
                let aqq = g.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Apply the rotation J(p, q) on both sides: G ← Jᵀ G J.
                for k in 0..n {
                    let gkp = g.data[k * n + p];
                    let gkq = g.data[k * n + q];
                    g.data[k * n + p] = c * gkp - s * gkq;
                    g.data[k * n + q] = s * gkp + c * gkq;
                }
                for k in 0..n {
                    let gpk = g.data[p * n + k];
                    let gqk = g.data[q * n + k];
                    g.data[p * n + k] = c * gpk - s * gqk;
                    g.data[q * n + k] = s * gpk + c * gqk;
                }
            }
        }
    }
    if off(&g) <= tol * total {
        return Ok(max_diag(&g));
    }
    Err(Error::NotConverged {
        iterations: max_sweeps,
        estimate: max_diag(&g),
    })
}

/// Uniform draw from the unit sphere `S^{d-1}`, as a normalized Gaussian.
pub fn sample_sphere(rng: &mut Rng, d: usize) -> Result<Vector> {
    if d == 0 {
        return Err(invalid("sphere dimension must be at least 1"));
    }
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.standard_normal()).collect();
        let n = norm(&g);
        if n > 0.0 {
            return Ok(Vector {
                data: g.into_iter().map(|x| x / n).collect(),
            });
        }
    }
}
