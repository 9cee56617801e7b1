//! Dense linear algebra for the small matrices this crate deals with.
//!
//! Every matrix here is at most a few dozen rows: `m×m` correlation matrices,
//! `p×p` information matrices and the `m×p` per-subject designs. Symmetric
//! eigenproblems are solved with cyclic Jacobi rotations, which keep the
//! eigenvectors orthonormal to machine precision and are fully deterministic.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{GeeError, Result};

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-14;

/// A square symmetric matrix, stored row-major.
///
/// Construction symmetrizes the input (`(a + aᵀ)/2`), so `get(j, k) == get(k, j)`
/// holds bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        if dim == 0 {
            return Err(GeeError::InvalidInput(
                "matrix dimension must be >= 1".into(),
            ));
        }
        let mut data = vec![0.0; dim * dim];
        for j in 0..dim {
            for k in 0..dim {
                data[j * dim + k] = f(j, k);
            }
        }
        let mut s = SymMatrix { dim, data };
        s.symmetrize();
        Ok(s)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        if rows.iter().any(|r| r.len() != dim) {
            return Err(GeeError::Shape(format!(
                "expected a square {dim}x{dim} matrix"
            )));
        }
        Self::from_fn(dim, |j, k| rows[j][k])
    }

    pub fn identity(dim: usize) -> Self {
        Self::diag(&vec![1.0; dim.max(1)])
    }

    pub fn zeros(dim: usize) -> Self {
        let dim = dim.max(1);
        SymMatrix {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let dim = values.len().max(1);
        let mut data = vec![0.0; dim * dim];
        for (j, v) in values.iter().enumerate() {
            data[j * dim + j] = *v;
        }
        SymMatrix { dim, data }
    }

    fn symmetrize(&mut self) {
        let n = self.dim;
        for j in 0..n {
            for k in (j + 1)..n {
                let avg = 0.5 * (self.data[j * n + k] + self.data[k * n + j]);
                self.data[j * n + k] = avg;
                self.data[k * n + j] = avg;
            }
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, j: usize, k: usize) -> f64 {
        self.data[j * self.dim + k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.dim).map(|r| r.to_vec()).collect()
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|j| self.get(j, j)).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|j| self.get(j, j)).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, c: f64) -> Self {
        SymMatrix {
            dim: self.dim,
            data: self.data.iter().map(|v| c * v).collect(),
        }
    }

    pub fn add(&self, other: &SymMatrix) -> Self {
        assert_eq!(self.dim, other.dim);
        SymMatrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a + b)
                .collect(),
        }
    }

    pub fn sub(&self, other: &SymMatrix) -> Self {
        assert_eq!(self.dim, other.dim);
        SymMatrix {
            dim: self.dim,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(a, b)| a - b)
                .collect(),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        self.data.chunks(self.dim).map(|row| dot(row, x)).collect()
    }

    pub fn quad_form(&self, x: &[f64]) -> f64 {
        dot(x, &self.mul_vec(x))
    }

    /// Plain product `self · other`. The result is generally not symmetric, so it
    /// comes back as rows.
    pub fn matmul(&self, other: &SymMatrix) -> Vec<Vec<f64>> {
        let n = self.dim;
        assert_eq!(n, other.dim);
        (0..n)
            .map(|j| {
                (0..n)
                    .map(|k| (0..n).map(|l| self.get(j, l) * other.get(l, k)).sum())
                    .collect()
            })
            .collect()
    }

    /// `self · other · self`, symmetric whenever `other` is.
    pub fn sandwich(&self, other: &SymMatrix) -> SymMatrix {
        let n = self.dim;
        let left = self.matmul(other);
        SymMatrix::from_fn(n, |j, k| (0..n).map(|l| left[j][l] * self.get(l, k)).sum())
            .expect("dim >= 1")
    }

    pub fn max_abs_diff(&self, other: &SymMatrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Accumulate `c · v vᵀ` in place.
    pub fn add_outer(&mut self, v: &[f64], c: f64) {
        let n = self.dim;
        for j in 0..n {
            for k in 0..n {
                self.data[j * n + k] += c * v[j] * v[k];
            }
        }
    }

    /// Accumulate a symmetric contribution given as a closure over `(j, k)`.
    pub(crate) fn add_from_fn(&mut self, mut f: impl FnMut(usize, usize) -> f64) {
        let n = self.dim;
        for j in 0..n {
            for k in j..n {
                let v = f(j, k);
                self.data[j * n + k] += v;
                if k != j {
                    self.data[k * n + j] += v;
                }
            }
        }
    }
}

impl Serialize for SymMatrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for SymMatrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        SymMatrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// A general dense row-major matrix; used for the `m×p` subject designs.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(GeeError::InvalidInput(
                "matrix must have at least one row and column".into(),
            ));
        }
        if data.len() != rows * cols {
            return Err(GeeError::Shape(format!(
                "expected {} entries for a {rows}x{cols} matrix, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(GeeError::Shape("ragged rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
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
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn scale(&self, c: f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| c * v).collect(),
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `selfᵀ · v` for a vector with one entry per row.
    pub fn t_mul_vec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(v.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (r, vr) in v.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(self.row(r)) {
                *o += x * vr;
            }
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Eigenvalues in nondecreasing order with matching orthonormal eigenvectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    /// `vectors[k]` is the unit eigenvector belonging to `values[k]`.
    pub vectors: Vec<Vec<f64>>,
}

impl EigenDecomposition {
    pub fn lambda_min(&self) -> f64 {
        self.values[0]
    }

    pub fn lambda_max(&self) -> f64 {
        *self.values.last().expect("dim >= 1")
    }

    /// `V · diag(f(λ)) · Vᵀ`.
    pub fn recompose(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.values.len();
        let fl: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        SymMatrix::from_fn(n, |j, k| {
            (0..n)
                .map(|e| self.vectors[e][j] * fl[e] * self.vectors[e][k])
                .sum()
        })
        .expect("dim >= 1")
    }
}

/// Relative positive-definiteness threshold: `1e-12 · max(1, trace/dim)`.
pub fn pd_tolerance(s: &SymMatrix) -> f64 {
    1e-12 * (s.trace() / s.dim() as f64).max(1.0)
}

fn check_finite(s: &SymMatrix) -> Result<()> {
    if s.is_finite() {
        Ok(())
    } else {
        Err(GeeError::InvalidInput(
            "matrix has non-finite entries".into(),
        ))
    }
}

/// Cyclic Jacobi eigendecomposition.
pub fn sym_eigen(s: &SymMatrix) -> Result<EigenDecomposition> {
    check_finite(s)?;
    let n = s.dim();
    let mut a = s.data.clone();
    // v is stored row-major; columns are eigenvectors.
    let mut v = SymMatrix::identity(n).data;
    let scale = s.frobenius_norm();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for j in 0..n {
            for k in 0..n {
                if j != k {
                    off += a[j * n + k] * a[j * n + k];
                }
            }
        }
        if off.sqrt() <= JACOBI_REL_TOL * scale || off == 0.0 {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| a[x * n + x].total_cmp(&a[y * n + y]));

    let values = order.iter().map(|&e| a[e * n + e]).collect();
    let vectors = order
        .iter()
        .map(|&e| {
            let mut col: Vec<f64> = (0..n).map(|k| v[k * n + e]).collect();
            // sign convention: largest-magnitude component positive (first one on ties)
            let mut lead = 0;
            for k in 1..n {
                if col[k].abs() > col[lead].abs() {
                    lead = k;
                }
            }
            if col[lead] < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    Ok(EigenDecomposition { values, vectors })
}

fn require_pd(s: &SymMatrix, eig: &EigenDecomposition) -> Result<()> {
    let lmin = eig.lambda_min();
    if lmin <= pd_tolerance(s) {
        Err(GeeError::NotPositiveDefinite { lambda_min: lmin })
    } else {
        Ok(())
    }
}

/// Returns `(S^{1/2}, S^{-1/2})` for symmetric positive definite `S`.
pub fn sym_sqrt_pair(s: &SymMatrix) -> Result<(SymMatrix, SymMatrix)> {
    let eig = sym_eigen(s)?;
    require_pd(s, &eig)?;
    Ok((eig.recompose(f64::sqrt), eig.recompose(|l| 1.0 / l.sqrt())))
}

struct Cholesky {
    n: usize,
    l: Vec<f64>,
}

impl Cholesky {
    fn factor(s: &SymMatrix) -> Result<Self> {
        check_finite(s)?;
        let n = s.dim();
        let tol = pd_tolerance(s);
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = s.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d <= tol || !d.is_finite() {
                let lambda_min = sym_eigen(s)?.lambda_min();
                return Err(GeeError::NotPositiveDefinite { lambda_min });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in (j + 1)..n {
                let mut acc = s.get(i, j);
                for k in 0..j {
                    acc -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = acc / djj;
            }
        }
        Ok(Cholesky { n, l })
    }

    fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = b.to_vec();
        for i in 0..n {
            for k in 0..i {
                y[i] -= self.l[i * n + k] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                y[i] -= self.l[k * n + i] * y[k];
            }
            y[i] /= self.l[i * n + i];
        }
        y
    }
}

/// Lower-triangular `L` with `L Lᵀ = S`, returned as a dense `Mat`.
pub fn cholesky_lower(s: &SymMatrix) -> Result<Mat> {
    let chol = Cholesky::factor(s)?;
    Mat::new(chol.n, chol.n, chol.l)
}

/// Solves `S x = b` for SPD `S` (Cholesky plus one round of iterative refinement).
pub fn solve_spd(s: &SymMatrix, b: &[f64]) -> Result<Vec<f64>> {
    if b.len() != s.dim() {
        return Err(GeeError::Shape(format!(
            "rhs has {} entries, matrix is {}x{}",
            b.len(),
            s.dim(),
            s.dim()
        )));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(GeeError::InvalidInput("rhs has non-finite entries".into()));
    }
    let chol = Cholesky::factor(s)?;
    let mut x = chol.solve(b);
    let resid: Vec<f64> = s
        .mul_vec(&x)
        .iter()
        .zip(b)
        .map(|(sx, bi)| bi - sx)
        .collect();
    let corr = chol.solve(&resid);
    x.iter_mut().zip(&corr).for_each(|(xi, ci)| *xi += ci);
    Ok(x)
}

/// Inverse of an SPD matrix, column by column through the Cholesky factor.
pub fn inverse_spd(s: &SymMatrix) -> Result<SymMatrix> {
    let n = s.dim();
    let chol = Cholesky::factor(s)?;
    let cols: Vec<Vec<f64>> = (0..n)
        .map(|k| {
            let mut e = vec![0.0; n];
            e[k] = 1.0;
            chol.solve(&e)
        })
        .collect();
    SymMatrix::from_fn(n, |j, k| cols[k][j])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatrixStats {
    pub spectral_norm: f64,
    pub det: f64,
    pub trace: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
}

pub fn matrix_stats(s: &SymMatrix) -> Result<MatrixStats> {
    let eig = sym_eigen(s)?;
    let lambda_min = eig.lambda_min();
    let lambda_max = eig.lambda_max();
    Ok(MatrixStats {
        spectral_norm: lambda_min.abs().max(lambda_max.abs()),
        det: eig.values.iter().product(),
        trace: s.trace(),
        lambda_min,
        lambda_max,
    })
}
