use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Plain vectors are `Vec<f64>`; the alias documents intent at call sites.
pub type Vector = Vec<f64>;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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
            return Err(Error::Shape {
                context: "Matrix::from_vec",
                expected: rows * cols,
                found: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vector]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for row in rows {
            if row.len() != cols {
                return Err(Error::Shape {
                    context: "Matrix::from_rows",
                    expected: cols,
                    found: row.len(),
                });
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
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

    pub fn to_rows(&self) -> Vec<Vector> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    /// Appends one row at the bottom.
    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.cols {
            return Err(Error::Shape {
                context: "Matrix::push_row",
                expected: self.cols,
                found: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// `self · v` for a column vector `v`.
    pub fn matvec(&self, v: &[f64]) -> Result<Vector> {
        if v.len() != self.cols {
            return Err(Error::Shape {
                context: "Matrix::matvec",
                expected: self.cols,
                found: v.len(),
            });
        }
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Strided view of a row-major operand, used to express transposes
/// without copying.
#[derive(Clone, Copy)]
pub(crate) struct Operand<'a> {
    pub data: &'a [f64],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> Operand<'a> {
    pub fn plain(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            row_stride: m.cols,
            col_stride: 1,
        }
    }

    pub fn transposed(m: &'a Matrix) -> Self {
        Self {
            data: &m.data,
            row_stride: 1,
            col_stride: m.cols,
        }
    }

    fn max_index(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * self.row_stride + (cols - 1) * self.col_stride
        }
    }
}

/// `out = a · b + beta · out` where `a` is `m×k` and `b` is `k×n` and
/// `out` is a row-major `m×n` matrix. Single-threaded, so results are
/// reproducible for fixed shapes.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: Operand, b: Operand, beta: f64, out: &mut Matrix) {
    assert_eq!(out.shape(), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        out.data.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    assert!(a.max_index(m, k) < a.data.len(), "gemm lhs out of bounds");
    assert!(b.max_index(k, n) < b.data.len(), "gemm rhs out of bounds");
    // SAFETY: the asserts above bound every index the kernel can touch, and
    // `out` is an exclusively borrowed contiguous m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            out.data.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(matches!(
            Matrix::from_vec(2, 3, vec![0.0; 5]),
            Err(Error::Shape {
                expected: 6,
                found: 5,
                ..
            })
        ));
    }

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(2, 3, vec![0.5, -1.0, 2.0, 1.5, 0.0, -2.0]).unwrap();
        // a · bᵀ
        let mut out = Matrix::zeros(2, 2);
        gemm(2, 3, 2, Operand::plain(&a), Operand::transposed(&b), 0.0, &mut out);
        for i in 0..2 {
            for j in 0..2 {
                let expect = dot(a.row(i), b.row(j));
                assert_eq!(out.get(i, j), expect);
            }
        }
        // aᵀ · b
        let mut out = Matrix::zeros(3, 3);
        gemm(3, 2, 3, Operand::transposed(&a), Operand::plain(&b), 0.0, &mut out);
        for i in 0..3 {
            for j in 0..3 {
                let expect = a.get(0, i) * b.get(0, j) + a.get(1, i) * b.get(1, j);
                assert!((out.get(i, j) - expect).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn matvec_identity() {
        let v = vec![1.5, -2.0, 3.0];
        assert_eq!(Matrix::identity(3).matvec(&v).unwrap(), v);
    }
}
