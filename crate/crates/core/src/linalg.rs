//! Dense row-major `f64` linear algebra.
//!
//! Products are dispatched to `matrixmultiply`'s packed GEMM; Cholesky,
//! triangular solves and the symmetric eigensolver are implemented here.
//! Everything is deterministic: the same inputs always produce bit-identical
//! outputs regardless of how many worker threads are available.

use std::fmt;
use std::ops::{Index, IndexMut};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows per parallel GEMM task. Fixed so results never depend on the pool size.
const GEMM_ROW_CHUNK: usize = 64;
/// Below this many multiply-adds a product runs on the calling thread.
const GEMM_PAR_THRESHOLD: usize = 1 << 22;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(r)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Matrix { rows, cols, data }
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Contract(format!(
                    "row {i} has {} entries, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column_vector(values: &[f64]) -> Self {
        Matrix {
            rows: values.len(),
            cols: 1,
            data: values.to_vec(),
        }
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Matrix {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Matrix::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m[(i, i)] = *v;
        }
        m
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, zero-width matrices still have rows
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
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

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Appends the rows of `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols && self.rows > 0 && other.rows > 0 {
            return Err(Error::shape("vstack", self.shape(), other.shape()));
        }
        let cols = if self.rows > 0 { self.cols } else { other.cols };
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols,
            data,
        })
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.data.is_empty() {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::shape("push_row", self.shape(), (1, row.len())));
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    /// Element-wise (Hadamard) product.
    pub fn hadamard(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "hadamard", |a, b| a * b)
    }

    fn zip_with(
        &self,
        other: &Matrix,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("add_assign", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn mean_diag(&self) -> f64 {
        let n = self.rows.min(self.cols);
        if n == 0 {
            0.0
        } else {
            self.trace() / n as f64
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|a_ij - a_ji|` relative to the largest entry.
    pub fn asymmetry(&self) -> f64 {
        let scale = self.max_abs();
        if scale == 0.0 {
            return 0.0;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in 0..i {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst / scale
    }

    /// `‖self − other‖_F / max(‖other‖_F, tiny)`.
    pub fn rel_diff(&self, other: &Matrix) -> f64 {
        debug_assert_eq!(self.shape(), other.shape());
        let num: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        num / other.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    pub fn argmax_row(&self, r: usize) -> usize {
        argmax(self.row(r))
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // four accumulators keep the loop vectorizable
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = 4 * i;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in 4 * chunks..a.len() {
        s += a[j] * b[j];
    }
    s
}

#[derive(Clone, Copy)]
enum Op {
    N,
    T,
}

/// `op(a) · op(b)` through the packed GEMM kernel.
fn gemm(a: &Matrix, op_a: Op, b: &Matrix, op_b: Op, name: &'static str) -> Result<Matrix> {
    let (m, k) = match op_a {
        Op::N => (a.rows, a.cols),
        Op::T => (a.cols, a.rows),
    };
    let (k2, n) = match op_b {
        Op::N => (b.rows, b.cols),
        Op::T => (b.cols, b.rows),
    };
    if k != k2 {
        return Err(Error::shape(name, a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(m, n);
    if m == 0 || n == 0 || k == 0 {
        return Ok(out);
    }
    let (rsa, csa) = match op_a {
        Op::N => (a.cols as isize, 1),
        Op::T => (1, a.cols as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (b.cols as isize, 1),
        Op::T => (1, b.cols as isize),
    };
    let a_data = a.data.as_slice();
    let b_data = b.data.as_slice();
    let block = |row0: usize, chunk: &mut [f64]| {
        let mr = chunk.len() / n;
        // SAFETY: the strides describe `op(a)` rows row0..row0+mr, all of `op(b)`
        // and a dense mr×n output chunk; every index stays inside its slice.
        unsafe {
            matrixmultiply::dgemm(
                mr,
                k,
                n,
                1.0,
                a_data.as_ptr().offset(row0 as isize * rsa),
                rsa,
                csa,
                b_data.as_ptr(),
                rsb,
                csb,
                0.0,
                chunk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * n * k >= GEMM_PAR_THRESHOLD && m > GEMM_ROW_CHUNK {
        out.data
            .par_chunks_mut(GEMM_ROW_CHUNK * n)
            .enumerate()
            .for_each(|(i, chunk)| block(i * GEMM_ROW_CHUNK, chunk));
    } else {
        block(0, &mut out.data);
    }
    Ok(out)
}

/// `a · b`.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, Op::N, b, Op::N, "matmul")
}

/// `aᵀ · b`.
pub fn matmul_tn(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, Op::T, b, Op::N, "matmul_tn")
}

/// `a · bᵀ`.
pub fn matmul_nt(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    gemm(a, Op::N, b, Op::T, "matmul_nt")
}

/// Diagonal jitter levels tried in order, as multiples of the mean diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JitterPolicy {
    pub ladder: Vec<f64>,
}

impl Default for JitterPolicy {
    fn default() -> Self {
        JitterPolicy {
            ladder: vec![0.0, 1e-10, 1e-8, 1e-6],
        }
    }
}

impl JitterPolicy {
    /// Factor exactly, never adding jitter.
    pub fn exact() -> Self {
        JitterPolicy { ladder: vec![0.0] }
    }
}

/// Lower-triangular factor of `a + jitter·I`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CholeskyFactor {
    lower: Matrix,
    jitter_applied: f64,
}

impl CholeskyFactor {
    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    pub fn jitter_applied(&self) -> f64 {
        self.jitter_applied
    }

    pub fn dim(&self) -> usize {
        self.lower.rows
    }

    /// `lower · lowerᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        matmul_nt(&self.lower, &self.lower).expect("square factor")
    }

    /// Solves `lower · y = b` in place, column-wise over a row-major RHS.
    pub fn forward_in_place(&self, b: &mut Matrix) {
        let n = self.dim();
        let m = b.cols;
        for i in 0..n {
            let (done, rest) = b.data.split_at_mut(i * m);
            let bi = &mut rest[..m];
            let li = self.lower.row(i);
            for (k, &lik) in li[..i].iter().enumerate() {
                if lik != 0.0 {
                    let bk = &done[k * m..(k + 1) * m];
                    for (x, y) in bi.iter_mut().zip(bk) {
                        *x -= lik * y;
                    }
                }
            }
            let d = li[i];
            for x in bi.iter_mut() {
                *x /= d;
            }
        }
    }

    /// Solves `lowerᵀ · x = y` in place.
    pub fn backward_in_place(&self, y: &mut Matrix) {
        let n = self.dim();
        let m = y.cols;
        for i in (0..n).rev() {
            let d = self.lower[(i, i)];
            {
                let yi = &mut y.data[i * m..(i + 1) * m];
                for x in yi.iter_mut() {
                    *x /= d;
                }
            }
            // eliminate x_i from the rows above it
            let (head, tail) = y.data.split_at_mut(i * m);
            let xi = &tail[..m];
            for k in 0..i {
                let lik = self.lower[(i, k)];
                if lik != 0.0 {
                    let yk = &mut head[k * m..(k + 1) * m];
                    for (a, b) in yk.iter_mut().zip(xi) {
                        *a -= lik * b;
                    }
                }
            }
        }
    }

    pub fn solve_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        let mut m = Matrix::column_vector(b);
        chol_solve_in_place(self, &mut m)?;
        Ok(m.data)
    }

    /// `lower⁻¹ · b` for a single vector.
    pub fn forward_vec(&self, b: &[f64]) -> Result<Vec<f64>> {
        if b.len() != self.dim() {
            return Err(Error::shape("forward_vec", self.lower.shape(), (b.len(), 1)));
        }
        let mut m = Matrix::column_vector(b);
        self.forward_in_place(&mut m);
        Ok(m.data)
    }

    /// Factor of the bordered matrix `[[A, col], [colᵀ, diag]]` (with the same
    /// jitter added to `diag`), obtained from one forward solve and a square root.
    pub fn extend(&self, col: &[f64], diag: f64) -> Result<CholeskyFactor> {
        let n = self.dim();
        let w = self.forward_vec(col)?;
        let s2 = diag + self.jitter_applied - dot(&w, &w);
        if !(s2 > 0.0) || !s2.is_finite() {
            return Err(Error::NotPositiveDefinite {
                pivot: n,
                jitter: self.jitter_applied,
            });
        }
        let mut lower = Matrix::zeros(n + 1, n + 1);
        for i in 0..n {
            lower.row_mut(i)[..n].copy_from_slice(self.lower.row(i));
        }
        lower.row_mut(n)[..n].copy_from_slice(&w);
        lower[(n, n)] = s2.sqrt();
        Ok(CholeskyFactor {
            lower,
            jitter_applied: self.jitter_applied,
        })
    }
}

fn factor_with_jitter(a: &Matrix, jitter: f64) -> std::result::Result<Matrix, usize> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let s = dot(&l.row(i)[..j], &l.row(j)[..j]);
            if i == j {
                let d = a[(i, i)] + jitter - s;
                if !(d > 0.0) || !d.is_finite() {
                    return Err(i);
                }
                l[(i, i)] = d.sqrt();
            } else {
                l[(i, j)] = (a[(i, j)] - s) / l[(j, j)];
            }
        }
    }
    Ok(l)
}

/// Cholesky factorization, escalating diagonal jitter until it succeeds.
pub fn cholesky(a: &Matrix, policy: &JitterPolicy) -> Result<CholeskyFactor> {
    if !a.is_square() {
        return Err(Error::shape("cholesky", a.shape(), a.shape()));
    }
    if a.asymmetry() > 1e-10 {
        return Err(Error::Contract(format!(
            "cholesky input is not symmetric (relative asymmetry {:e})",
            a.asymmetry()
        )));
    }
    let scale = a.mean_diag();
    let mut last = (0, 0.0);
    for &level in &policy.ladder {
        let jitter = level * scale;
        match factor_with_jitter(a, jitter) {
            Ok(lower) => {
                return Ok(CholeskyFactor {
                    lower,
                    jitter_applied: jitter,
                })
            }
            Err(pivot) => last = (pivot, jitter),
        }
    }
    Err(Error::NotPositiveDefinite {
        pivot: last.0,
        jitter: last.1,
    })
}

fn chol_solve_in_place(f: &CholeskyFactor, b: &mut Matrix) -> Result<()> {
    if b.rows != f.dim() {
        return Err(Error::shape("chol_solve", f.lower.shape(), b.shape()));
    }
    f.forward_in_place(b);
    f.backward_in_place(b);
    Ok(())
}

/// Solves `(A + jitter·I) X = b` given the factor of `A`.
pub fn chol_solve(f: &CholeskyFactor, b: &Matrix) -> Result<Matrix> {
    let mut x = b.clone();
    chol_solve_in_place(f, &mut x)?;
    Ok(x)
}

/// Symmetric eigendecomposition.
#[derive(Clone, Debug)]
pub struct SymEig {
    /// Eigenvalues, descending.
    pub values: Vec<f64>,
    /// Eigenvectors as columns, in the order of `values`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi eigensolver for symmetric matrices.
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    if !a.is_square() {
        return Err(Error::shape("sym_eig", a.shape(), a.shape()));
    }
    if a.asymmetry() > 1e-10 {
        return Err(Error::Contract(format!(
            "sym_eig input is not symmetric (relative asymmetry {:e})",
            a.asymmetry()
        )));
    }
    let n = a.rows;
    // symmetrize exactly so rotations act on a truly symmetric matrix
    let mut m = Matrix::from_fn(n, n, |i, j| 0.5 * (a[(i, j)] + a[(j, i)]));
    let mut v = Matrix::identity(n);
    let total = m.frobenius_norm();

    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * total || total == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(j, j)].total_cmp(&m[(i, i)]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}
