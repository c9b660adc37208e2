//! Dense row-major tensors.

use super::graph::sigmoid;
use crate::error::{KklError, Result};
use crate::scalar::Scalar;

/// Shape-tagged row-major array of reals.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<S> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<S>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(KklError::BadTensor {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![S::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: S) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(value: S) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    /// `[rows, cols]` matrix from row-major data.
    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    /// `[1, n]` row vector.
    pub fn row(data: Vec<S>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn from_f64(shape: impl Into<Vec<usize>>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::lit(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[0]
    }

    /// Columns of a rank-2 tensor.
    pub fn cols(&self) -> usize {
        debug_assert_eq!(self.rank(), 2);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.shape[1] + c]
    }

    pub fn row_slice(&self, r: usize) -> &[S] {
        let c = self.shape[1];
        &self.data[r * c..(r + 1) * c]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> S {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Self::new(shape, self.data.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(KklError::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S) -> Result<Self> {
        self.check_same(other, "elementwise")?;
        Ok(Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same(&self, other: &Self, context: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(KklError::ShapeMismatch {
                context: context.to_string(),
                expected: self.shape.clone(),
                got: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: S) -> Self {
        self.map(|v| v * s)
    }

    /// In-place `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same(other, "accumulate")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sum(&self) -> S {
        self.data.iter().copied().sum()
    }

    pub fn sq_norm(&self) -> S {
        self.data.iter().map(|&v| v * v).sum()
    }

    pub fn norm(&self) -> S {
        self.sq_norm().sqrt()
    }

    pub fn max_abs(&self) -> S {
        self.data
            .iter()
            .fold(S::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        matmul_t(self, false, rhs, false)
    }

    pub fn transpose(&self) -> Result<Self> {
        if self.rank() != 2 {
            return Err(KklError::ShapeMismatch {
                context: "transpose".into(),
                expected: vec![0, 0],
                got: self.shape.clone(),
            });
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![S::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Self {
            shape: vec![c, r],
            data: out,
        })
    }

    /// Adds a one-row tensor to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        let (_, cols) = as_matrix(self, "add_row input")?;
        if row.numel() != cols {
            return Err(KklError::ShapeMismatch {
                context: "add_row bias".into(),
                expected: vec![1, cols],
                got: row.shape.clone(),
            });
        }
        let mut out = self.clone();
        if cols > 0 {
            for chunk in out.data.chunks_mut(cols) {
                for (o, &b) in chunk.iter_mut().zip(&row.data) {
                    *o += b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn tanh(&self) -> Self {
        self.map(|e| e.tanh())
    }

    pub fn sigmoid(&self) -> Self {
        self.map(sigmoid)
    }

    /// `[a | b]` along columns.
    pub fn concat_cols(&self, other: &Self) -> Result<Self> {
        let (ra, ca) = as_matrix(self, "concat lhs")?;
        let (rb, cb) = as_matrix(other, "concat rhs")?;
        if ra != rb {
            return Err(KklError::ShapeMismatch {
                context: "concat rows".into(),
                expected: vec![ra, cb],
                got: other.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(&self.data[r * ca..(r + 1) * ca]);
            data.extend_from_slice(&other.data[r * cb..(r + 1) * cb]);
        }
        Self::matrix(ra, ca + cb, data)
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        let (rows, cols) = as_matrix(self, "slice_cols")?;
        if start + len > cols {
            return Err(KklError::ShapeMismatch {
                context: "slice_cols range".into(),
                expected: vec![rows, start + len],
                got: self.shape.clone(),
            });
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&self.data[r * cols + start..r * cols + start + len]);
        }
        Self::matrix(rows, len, data)
    }

    /// Row-wise vector-matrix product: row `i` of `self` (length `p`) times
    /// row `i` of `m` read as a row-major `p × q` matrix.
    pub fn row_vec_mat(&self, m: &Self) -> Result<Self> {
        let (n, p) = as_matrix(self, "row_vec_mat vector")?;
        let (nm, pq) = as_matrix(m, "row_vec_mat matrix")?;
        if nm != n || p == 0 || pq % p != 0 {
            return Err(KklError::ShapeMismatch {
                context: "row_vec_mat".into(),
                expected: vec![n, p],
                got: m.shape.clone(),
            });
        }
        let q = pq / p;
        let mut out = vec![S::zero(); n * q];
        for r in 0..n {
            let xr = &self.data[r * p..(r + 1) * p];
            let mr = &m.data[r * pq..(r + 1) * pq];
            let o = &mut out[r * q..(r + 1) * q];
            for (i, &xi) in xr.iter().enumerate() {
                for (oj, &mij) in o.iter_mut().zip(&mr[i * q..(i + 1) * q]) {
                    *oj += xi * mij;
                }
            }
        }
        Self::matrix(n, q, out)
    }

    /// Converts between scalar types.
    pub fn cast<T: Scalar>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| T::lit(v.as_f64())).collect(),
        }
    }
}

fn as_matrix<S>(t: &Tensor<S>, context: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(KklError::ShapeMismatch {
            context: context.to_string(),
            expected: vec![0, 0],
            got: t.shape.clone(),
        });
    }
    Ok((t.shape[0], t.shape[1]))
}

/// `op(a) · op(b)` where `op` optionally transposes; used by the forward and
/// backward matmul rules so no explicit transposes are materialised.
pub fn matmul_t<S: Scalar>(
    a: &Tensor<S>,
    ta: bool,
    b: &Tensor<S>,
    tb: bool,
) -> Result<Tensor<S>> {
    let (ar, ac) = as_matrix(a, "matmul lhs")?;
    let (br, bc) = as_matrix(b, "matmul rhs")?;
    let (m, k, rsa, csa) = if ta {
        (ac, ar, 1isize, ac as isize)
    } else {
        (ar, ac, ac as isize, 1isize)
    };
    let (k2, n, rsb, csb) = if tb {
        (bc, br, 1isize, bc as isize)
    } else {
        (br, bc, bc as isize, 1isize)
    };
    if k != k2 {
        return Err(KklError::ShapeMismatch {
            context: "matmul inner dimension".into(),
            expected: vec![m, k],
            got: vec![k2, n],
        });
    }
    let mut out = vec![S::zero(); m * n];
    S::gemm(
        m,
        k,
        n,
        S::one(),
        &a.data,
        rsa,
        csa,
        &b.data,
        rsb,
        csb,
        S::zero(),
        &mut out,
        n as isize,
        1,
    );
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_length() {
        assert!(Tensor::<f64>::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 0], vec![]).is_ok());
    }

    #[test]
    fn transposed_products_agree() {
        let a = Tensor::<f64>::from_f64([2, 3], &[1., 2., 3., 4., 5., 6.]).unwrap();
        let b = Tensor::<f64>::from_f64([2, 2], &[1., -1., 0.5, 2.]).unwrap();
        let direct = a.transpose().unwrap().matmul(&b).unwrap();
        let fused = matmul_t(&a, true, &b, false).unwrap();
        assert_eq!(direct, fused);
        let direct = b.matmul(&b.transpose().unwrap()).unwrap();
        let fused = matmul_t(&b, false, &b, true).unwrap();
        assert_eq!(direct, fused);
    }

    #[test]
    fn finiteness_is_checked() {
        let t = Tensor::<f64>::row(vec![1.0, f64::NAN]);
        assert!(matches!(t.ensure_finite("x"), Err(KklError::NonFinite(_))));
    }
}
