//! Dense row-major `f64` matrices and the handful of kernels the rest of the
//! crate needs: products, Frobenius norms, Gram products and a one-sided
//! Jacobi SVD.
//!
//! Every reduction runs in a fixed loop order, so results are bit-identical
//! across runs and thread counts.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Sweep cap for the Jacobi SVD.
pub const SVD_MAX_SWEEPS: usize = 100;
/// Relative off-diagonal threshold below which a column pair counts as orthogonal.
pub const SVD_TOLERANCE: f64 = 1e-12;

#[derive(Clone, PartialEq)]
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
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Invalid(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`Matrix::from_vec`] but also rejects NaN/Inf entries.
    pub fn from_vec_finite(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                location: format!("matrix entry {i}"),
            });
        }
        Self::from_vec(rows, cols, data)
    }

    /// Panics on ragged input; meant for literals in tests and examples.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
        }
        m
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
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
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
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

    /// `self · rhs` with a fixed (row, k) accumulation order.
    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::shape("matmul", self.shape(), rhs.shape()));
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        gemm(&self.data, self.rows, self.cols, &rhs.data, rhs.cols, &mut out.data);
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.rows != rhs.rows {
            return Err(Error::shape("t_matmul", self.shape(), rhs.shape()));
        }
        let mut out = Matrix::zeros(self.cols, rhs.cols);
        gemm_tn_acc(&self.data, self.rows, self.cols, &rhs.data, rhs.cols, &mut out.data);
        Ok(out)
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::shape("matmul_t", self.shape(), rhs.shape()));
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        gemm_nt(&self.data, self.rows, self.cols, &rhs.data, rhs.rows, &mut out.data);
        Ok(out)
    }

    pub fn frobenius_norm_sq(&self) -> f64 {
        frobenius_norm_sq(self)
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm_sq(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn scale(&self, k: f64) -> Matrix {
        let mut out = self.clone();
        out.scale_in_place(k);
        out
    }

    pub fn scale_in_place(&mut self, k: f64) {
        for v in &mut self.data {
            *v *= k;
        }
    }

    /// `self += k · other`.
    pub fn axpy(&mut self, k: f64, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape("axpy", self.shape(), other.shape()));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += k * b;
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(1.0, other)?;
        Ok(out)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        let mut out = self.clone();
        out.axpy(-1.0, other)?;
        Ok(out)
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    /// Largest absolute entry of `self − other`.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Multiply column `c` by `d[c]`, i.e. `self · diag(d)`.
    pub fn scale_columns(&self, d: &[f64]) -> Matrix {
        assert_eq!(d.len(), self.cols);
        let mut out = self.clone();
        for r in 0..self.rows {
            for (v, &k) in out.row_mut(r).iter_mut().zip(d) {
                *v *= k;
            }
        }
        out
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

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    a.matmul(b)
}

pub fn frobenius_norm_sq(a: &Matrix) -> f64 {
    a.data.iter().map(|v| v * v).sum()
}

/// `w1 · w1ᵀ`, symmetrized by averaging with its transpose.
pub fn gram_right(w1: &Matrix) -> Matrix {
    let n = w1.rows;
    let mut g = Matrix::zeros(n, n);
    gemm_nt(&w1.data, n, w1.cols, &w1.data, n, &mut g.data);
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (g.data[i * n + j] + g.data[j * n + i]);
            g.data[i * n + j] = avg;
            g.data[j * n + i] = avg;
        }
    }
    g
}

/// `w2 · w1 · w1ᵀ`, associating whichever way is cheaper for the shapes.
pub fn right_gram_product(w2: &Matrix, w1: &Matrix) -> Result<Matrix> {
    if w2.cols != w1.rows {
        return Err(Error::shape("right_gram_product", w2.shape(), w1.shape()));
    }
    if w1.cols < w1.rows {
        w2.matmul(w1)?.matmul_t(w1)
    } else {
        w2.matmul(&gram_right(w1))
    }
}

/// `out = a · b` for row-major `a` (m×k) and `b` (k×n).
pub fn gemm(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * b_pj;
            }
        }
    }
}

/// `out += aᵀ · b` for row-major `a` (m×k) and `b` (m×n); `out` is k×n.
pub fn gemm_tn_acc(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for r in 0..m {
        let a_row = &a[r * k..(r + 1) * k];
        let b_row = &b[r * n..(r + 1) * n];
        for (i, &a_ri) in a_row.iter().enumerate() {
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &b_rj) in out_row.iter_mut().zip(b_row) {
                *o += a_ri * b_rj;
            }
        }
    }
}

/// `out = a · bᵀ` for row-major `a` (m×k) and `b` (n×k).
pub fn gemm_nt(a: &[f64], m: usize, k: usize, b: &[f64], n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            out[i * n + j] = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four fixed lanes: vectorizes, and the summation order never changes.
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Thin SVD `A = U · diag(S) · Vᵀ` with `k = min(rows, cols)` columns in `U`/`V`.
#[derive(Clone, Debug)]
pub struct SvdResult {
    pub u: Matrix,
    pub s: Vec<f64>,
    pub v: Matrix,
    /// Number of singular values above `max(rows, cols) · ε · s₁`.
    pub rank: usize,
}

impl SvdResult {
    pub fn reconstruct(&self) -> Matrix {
        self.u
            .scale_columns(&self.s)
            .matmul_t(&self.v)
            .expect("svd factors have consistent shapes")
    }

    /// Column `i` of `U`.
    pub fn left(&self, i: usize) -> Vec<f64> {
        self.u.column(i)
    }
}

/// One-sided (Hestenes) Jacobi SVD on the smaller dimension.
///
/// Singular values come back in descending order. Each left singular vector is
/// signed so that its largest-magnitude entry is nonnegative (lowest row wins
/// ties); the matching right vector is flipped with it.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite {
            location: "svd input".into(),
        });
    }
    let mut out = if a.rows >= a.cols {
        jacobi_tall(a)?
    } else {
        let t = jacobi_tall(&a.transpose())?;
        SvdResult {
            u: t.v,
            s: t.s,
            v: t.u,
            rank: t.rank,
        }
    };
    fix_signs(&mut out);
    Ok(out)
}

fn jacobi_tall(a: &Matrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    // Column-major working copies: cols[j] is column j of A·V.
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    let mut residual = 0.0_f64;
    for _sweep in 0..SVD_MAX_SWEEPS {
        let mut rotated = false;
        residual = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || alpha == 0.0 || beta == 0.0 {
                    continue;
                }
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= SVD_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNoConvergence {
            sweeps: SVD_MAX_SWEEPS,
            residual,
        });
    }

    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps index order among equal singular values.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s: Vec<f64> = order.iter().map(|&i| norms[i]).collect();
    let s_max = s.first().copied().unwrap_or(0.0);
    let tol = (m.max(n) as f64) * f64::EPSILON * s_max;
    let rank = s.iter().filter(|&&v| v > tol && v > 0.0).count();

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    for &i in order.iter().take(rank) {
        u_cols.push(cols[i].iter().map(|x| x / norms[i]).collect());
    }
    complete_orthonormal(&mut u_cols, m, n);

    let mut u = Matrix::zeros(m, n);
    let mut v = Matrix::zeros(n, n);
    for (k, &i) in order.iter().enumerate() {
        for r in 0..m {
            u[(r, k)] = u_cols[k][r];
        }
        for r in 0..n {
            v[(r, k)] = vcols[i][r];
        }
    }
    Ok(SvdResult { u, s, v, rank })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Extend `basis` to `target` orthonormal vectors of length `dim` using
/// standard basis candidates and twice-repeated Gram-Schmidt.
fn complete_orthonormal(basis: &mut Vec<Vec<f64>>, dim: usize, target: usize) {
    let mut candidate = 0;
    while basis.len() < target && candidate < dim {
        let mut e = vec![0.0; dim];
        e[candidate] = 1.0;
        candidate += 1;
        for _ in 0..2 {
            for b in basis.iter() {
                let proj = dot(&e, b);
                for (x, y) in e.iter_mut().zip(b) {
                    *x -= proj * y;
                }
            }
        }
        let norm = dot(&e, &e).sqrt();
        if norm > 0.5 {
            e.iter_mut().for_each(|x| *x /= norm);
            basis.push(e);
        }
    }
}

fn fix_signs(res: &mut SvdResult) {
    let (m, k) = res.u.shape();
    for i in 0..k {
        let mut best = 0;
        let mut best_abs = -1.0;
        for r in 0..m {
            let a = res.u[(r, i)].abs();
            if a > best_abs {
                best_abs = a;
                best = r;
            }
        }
        if res.u[(best, i)] < 0.0 {
            for r in 0..m {
                res.u[(r, i)] = -res.u[(r, i)];
            }
            for r in 0..res.v.rows() {
                res.v[(r, i)] = -res.v[(r, i)];
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
        let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    pub fn orthogonality_error(q: &Matrix) -> f64 {
        let g = q.t_matmul(q).unwrap();
        g.max_abs_diff(&Matrix::identity(q.cols()))
    }
}
