//! Minimal dense linear algebra: symmetric eigendecomposition (cyclic
//! Jacobi), Cholesky factorization, SPD solves and triangular substitution.
//!
//! Matrices here are small (a few hundred rows at most), so the kernels
//! favor robustness over speed. Everything is `f64`, row-major, and pure:
//! no operation mutates its inputs.

use crate::error::{Error, Result};

/// Maximum number of Jacobi sweeps before giving up.
const JACOBI_MAX_SWEEPS: usize = 100;

/// Off-diagonal convergence threshold, relative to the Frobenius norm.
const JACOBI_TOL: f64 = 1e-12;

/// Relative asymmetry tolerated by the symmetric kernels.
const SYMMETRY_TOL: f64 = 1e-10;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    entries: Vec<f64>,
}

impl Matrix {
    /// Build a matrix from row-major entries. Rejects shape/length mismatch
    /// and non-finite values.
    pub fn new(rows: usize, cols: usize, entries: Vec<f64>) -> Result<Self> {
        if entries.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                entries.len()
            )));
        }
        if entries.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite matrix entry".into()));
        }
        Ok(Self { rows, cols, entries })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, entries: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
    }

    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, v) in values.iter().enumerate() {
            m.set(i, i, *v);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.cols + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.entries[row * self.cols + col] = value;
    }

    #[inline]
    pub fn row(&self, row: usize) -> &[f64] {
        &self.entries[row * self.cols..(row + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, row: usize) -> &mut [f64] {
        &mut self.entries[row * self.cols..(row + 1) * self.cols]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, col)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    /// `self * other`, ikj ordering so the inner loop runs over contiguous rows.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Dimension(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for (k, &aik) in a_row.iter().enumerate() {
                if aik == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                let o_row = out.row_mut(i);
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += aik * b;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if self.cols != x.len() {
            return Err(Error::Dimension(format!(
                "cannot apply {}x{} to vector of length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Dimension(format!(
                "shape mismatch: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let entries = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Matrix { rows: self.rows, cols: self.cols, entries })
    }

    pub fn scale(&self, factor: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            entries: self.entries.iter().map(|v| v * factor).collect(),
        }
    }

    /// Rank-one update `self += weight * x * y^T`.
    pub fn add_outer(&mut self, weight: f64, x: &[f64], y: &[f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (i, &xi) in x.iter().enumerate() {
            let w = weight * xi;
            for (o, &yj) in self.row_mut(i).iter_mut().zip(y) {
                *o += w * yj;
            }
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Symmetric up to `rel_tol` relative to the largest entry magnitude.
    pub fn is_symmetric(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let scale = self.max_abs().max(f64::MIN_POSITIVE);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                if (self.get(i, j) - self.get(j, i)).abs() > rel_tol * scale {
                    return false;
                }
            }
        }
        true
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (row, col): (usize, usize)) -> &f64 {
        &self.entries[row * self.cols + col]
    }
}

/// Eigendecomposition of a symmetric matrix. Eigenvalues are sorted
/// descending; column `i` of `eigenvectors` pairs with `eigenvalues[i]`.
#[derive(Debug, Clone)]
pub struct EigenResult {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

fn require_symmetric(a: &Matrix, op: &str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "{op} needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !a.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::Dimension(format!("{op} needs a symmetric matrix")));
    }
    Ok(())
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Each sweep zeroes every off-diagonal pair in turn; rotations accumulate
/// into the eigenvector matrix. Column signs are normalized (first entry of
/// magnitude above 1e-12 made positive) so results are reproducible.
pub fn sym_eig(a: &Matrix) -> Result<EigenResult> {
    require_symmetric(a, "sym_eig")?;
    let n = a.rows();
    // Work on the symmetrized copy so the tolerated input asymmetry cannot
    // leak into the result.
    let mut w = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            w.set(i, j, 0.5 * (a.get(i, j) + a.get(j, i)));
        }
    }
    let mut v = Matrix::identity(n);
    let norm = w.frobenius_norm();
    let threshold = JACOBI_TOL * norm;

    let mut converged = norm == 0.0 || n < 2;
    for _ in 0..JACOBI_MAX_SWEEPS {
        if converged {
            break;
        }
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * w.get(p, q).powi(2);
            }
        }
        if off.sqrt() <= threshold {
            converged = true;
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = w.get(p, q);
                if apq.abs() <= threshold / (n as f64) {
                    continue;
                }
                let app = w.get(p, p);
                let aqq = w.get(q, q);
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;

                w.set(p, p, app - t * apq);
                w.set(q, q, aqq + t * apq);
                w.set(p, q, 0.0);
                w.set(q, p, 0.0);
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = w.get(k, p);
                    let akq = w.get(k, q);
                    w.set(k, p, c * akp - s * akq);
                    w.set(p, k, c * akp - s * akq);
                    w.set(k, q, s * akp + c * akq);
                    w.set(q, k, s * akp + c * akq);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    if !converged {
        // Final check: the last sweep may have finished the job.
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += 2.0 * w.get(p, q).powi(2);
            }
        }
        if off.sqrt() > threshold {
            return Err(Error::Numerical(format!(
                "Jacobi eigensolver did not converge in {JACOBI_MAX_SWEEPS} sweeps"
            )));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w.get(j, j).partial_cmp(&w.get(i, i)).unwrap());

    let eigenvalues: Vec<f64> = order.iter().map(|&i| w.get(i, i)).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col = v.column(src);
        if let Some(first) = col.iter().find(|x| x.abs() > 1e-12) {
            if *first < 0.0 {
                for x in &mut col {
                    *x = -*x;
                }
            }
        }
        for (k, x) in col.iter().enumerate() {
            eigenvectors.set(k, dst, *x);
        }
    }
    Ok(EigenResult { eigenvalues, eigenvectors })
}

/// Cholesky factorization `a = L * L^T` with `L` lower triangular.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    require_symmetric(a, "cholesky")?;
    let n = a.rows();
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!(
                "pivot {d:.3e} at column {j}"
            )));
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in (j + 1)..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Ok(l)
}

/// Solve `L * X = B` for lower-triangular `L` by forward substitution.
pub fn solve_lower(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !l.is_square() || l.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "solve_lower: {}x{} vs rhs {}x{}",
            l.rows(),
            l.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = l.rows();
    let mut x = b.clone();
    for i in 0..n {
        let lii = l.get(i, i);
        if lii == 0.0 {
            return Err(Error::Numerical("zero diagonal in triangular solve".into()));
        }
        for k in 0..i {
            let lik = l.get(i, k);
            if lik == 0.0 {
                continue;
            }
            let (head, tail) = x.entries.split_at_mut(i * x.cols);
            let xk = &head[k * x.cols..(k + 1) * x.cols];
            for (xi, &xkj) in tail[..x.cols].iter_mut().zip(xk) {
                *xi -= lik * xkj;
            }
        }
        for v in x.row_mut(i) {
            *v /= lii;
        }
    }
    Ok(x)
}

/// Solve `L^T * X = B` for lower-triangular `L` by back substitution.
pub fn solve_lower_transpose(l: &Matrix, b: &Matrix) -> Result<Matrix> {
    if !l.is_square() || l.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "solve_lower_transpose: {}x{} vs rhs {}x{}",
            l.rows(),
            l.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let n = l.rows();
    let mut x = b.clone();
    for i in (0..n).rev() {
        let lii = l.get(i, i);
        if lii == 0.0 {
            return Err(Error::Numerical("zero diagonal in triangular solve".into()));
        }
        // (L^T)_{i,k} = L_{k,i} for k > i.
        for k in (i + 1)..n {
            let lki = l.get(k, i);
            if lki == 0.0 {
                continue;
            }
            let (head, tail) = x.entries.split_at_mut(k * x.cols);
            let xi = &mut head[i * x.cols..(i + 1) * x.cols];
            for (v, &xkj) in xi.iter_mut().zip(&tail[..x.cols]) {
                *v -= lki * xkj;
            }
        }
        for v in x.row_mut(i) {
            *v /= lii;
        }
    }
    Ok(x)
}

/// Solve `a * X = B` for symmetric positive-definite `a` via Cholesky.
pub fn spd_solve(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension(format!(
            "spd_solve: {}x{} vs rhs {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let l = cholesky(a).map_err(|e| match e {
        Error::NotPositiveDefinite(msg) => {
            Error::Numerical(format!("spd_solve on non-SPD matrix ({msg})"))
        }
        other => other,
    })?;
    let y = solve_lower(&l, b)?;
    solve_lower_transpose(&l, &y)
}

/// Vector convenience wrapper around [`spd_solve`].
pub fn spd_solve_vec(a: &Matrix, b: &[f64]) -> Result<Vec<f64>> {
    let rhs = Matrix::new(b.len(), 1, b.to_vec())?;
    let x = spd_solve(a, &rhs)?;
    Ok(x.column(0))
}
