use std::ops::{Index, IndexMut};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::scalar::{dot, Real};

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f64> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<T> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[T]) {
        for (i, &v) in values.iter().enumerate() {
            self[(i, j)] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `Aᵀ x`.
    pub fn tr_matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.rows);
        let mut out = vec![T::zero(); self.cols];
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * xi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix<T>) -> Matrix<T> {
        assert_eq!(self.cols, other.rows);
        let n = other.cols;
        let mut out = Matrix::zeros(self.rows, n);
        out.data
            .par_chunks_mut(n.max(1))
            .enumerate()
            .for_each(|(i, orow)| {
                for (k, &a) in self.row(i).iter().enumerate() {
                    if a == T::zero() {
                        continue;
                    }
                    for (o, &b) in orow.iter_mut().zip(other.row(k)) {
                        *o += a * b;
                    }
                }
            });
        out
    }

    /// `A Aᵀ`.
    pub fn gram_rows(&self) -> Matrix<T> {
        let n = self.rows;
        let mut out = Matrix::zeros(n, n);
        out.data
            .par_chunks_mut(n.max(1))
            .enumerate()
            .for_each(|(i, orow)| {
                for (j, o) in orow.iter_mut().enumerate() {
                    *o = dot(self.row(i), self.row(j));
                }
            });
        out
    }

    /// `Aᵀ A`.
    pub fn gram_cols(&self) -> Matrix<T> {
        self.transpose().gram_rows()
    }

    pub fn scale_rows(&mut self, factors: &[T]) {
        for (i, &f) in factors.iter().enumerate() {
            for v in self.row_mut(i) {
                *v *= f;
            }
        }
    }

    pub fn scale_cols(&mut self, factors: &[T]) {
        for i in 0..self.rows {
            for (v, &f) in self.row_mut(i).iter_mut().zip(factors) {
                *v *= f;
            }
        }
    }

    /// Horizontal concatenation.
    pub fn hstack(blocks: &[&Matrix<T>]) -> Result<Matrix<T>> {
        let rows = blocks.first().map_or(0, |b| b.rows);
        if blocks.iter().any(|b| b.rows != rows) {
            return Err(Error::Dimension("hstack row counts differ".into()));
        }
        let cols = blocks.iter().map(|b| b.cols).sum();
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for b in blocks {
                out.row_mut(i)[off..off + b.cols].copy_from_slice(b.row(i));
                off += b.cols;
            }
        }
        Ok(out)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> T {
        self.data.iter().map(|&v| v * v).sum::<T>().sqrt()
    }

    pub fn is_symmetric(&self, rel_tol: T) -> bool {
        if self.rows != self.cols {
            return false;
        }
        let scale = self.max_abs().max(T::min_positive_value());
        (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= rel_tol * scale))
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

/// Dense Cholesky factor `A = L Lᵀ`, `L` lower triangular (row-major).
#[derive(Clone, Debug)]
pub struct Cholesky<T = f64> {
    l: Matrix<T>,
}

impl<T: Real> Cholesky<T> {
    pub fn factor(a: &Matrix<T>) -> Result<Self> {
        if a.rows != a.cols {
            return Err(Error::Dimension("Cholesky of a non-square matrix".into()));
        }
        let n = a.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let (head, tail) = l.data.split_at_mut(j * n);
            let rj = &mut tail[..n];
            let d = a[(j, j)] - dot(&rj[..j], &rj[..j]);
            let _ = head;
            if !(d > T::zero()) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite(j));
            }
            let djj = d.sqrt();
            rj[j] = djj;
            // Rows below j: L[i][j] = (A[i][j] - L[i][..j]·L[j][..j]) / L[j][j].
            let lj: Vec<T> = rj[..j].to_vec();
            let below = &mut l.data[(j + 1) * n..];
            below.par_chunks_mut(n).enumerate().for_each(|(k, ri)| {
                let i = j + 1 + k;
                ri[j] = (a[(i, j)] - dot(&ri[..j], &lj)) / djj;
            });
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    pub fn lower(&self) -> &Matrix<T> {
        &self.l
    }

    /// Solves `L y = b`.
    pub fn solve_lower(&self, b: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut y = b.to_vec();
        for i in 0..n {
            let row = self.l.row(i);
            y[i] = (y[i] - dot(&row[..i], &y[..i])) / row[i];
        }
        y
    }

    /// Solves `Lᵀ x = y`.
    pub fn solve_upper(&self, y: &[T]) -> Vec<T> {
        let n = self.dim();
        let mut x = y.to_vec();
        for i in (0..n).rev() {
            x[i] /= self.l[(i, i)];
            let xi = x[i];
            let row = self.l.row(i);
            for k in 0..i {
                x[k] -= row[k] * xi;
            }
        }
        x
    }

    pub fn solve(&self, b: &[T]) -> Vec<T> {
        self.solve_upper(&self.solve_lower(b))
    }

    /// `L x`.
    pub fn mul_lower(&self, x: &[T]) -> Vec<T> {
        (0..self.dim())
            .map(|i| dot(&self.l.row(i)[..=i], &x[..=i]))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spd(n: usize) -> Matrix {
        let b = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let mut a = b.gram_rows();
        for i in 0..n {
            a[(i, i)] += 0.5;
        }
        a
    }

    #[test]
    fn cholesky_solves() {
        let a = spd(9);
        let c = Cholesky::factor(&a).unwrap();
        let x: Vec<f64> = (0..9).map(|i| i as f64 - 3.0).collect();
        let b = a.matvec(&x);
        let y = c.solve(&b);
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() < 1e-10);
        }
        let lx = c.mul_lower(&x);
        let back = c.solve_lower(&lx);
        for (u, v) in x.iter().zip(&back) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_indefinite() {
        let mut a = Matrix::<f64>::identity(3);
        a[(1, 1)] = -1.0;
        assert!(matches!(Cholesky::factor(&a), Err(Error::NotPositiveDefinite(1))));
    }

    #[test]
    fn products_agree() {
        let a = Matrix::from_fn(4, 6, |i, j| (i as f64 + 1.0) * (j as f64 - 2.0));
        let g = a.gram_rows();
        let g2 = a.matmul(&a.transpose());
        assert_eq!(g, g2);
        let x = vec![1.0, -1.0, 2.0, 0.5];
        let t = a.tr_matvec(&x);
        let t2 = a.transpose().matvec(&x);
        assert_eq!(t, t2);
    }
}
