//! Small dense complex linear algebra: matrices, Hermitian Cholesky solves
//! and sample covariance.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::{gemm, Op, Scalar};

/// Row-major dense complex matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex::new(T::zero(), T::zero()); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::new(T::one(), T::zero());
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!("{} entries", rows * cols), data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn column(&self, j: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn conj_transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn trace(&self) -> Complex<T> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .fold(Complex::new(T::zero(), T::zero()), |a, b| a + b)
    }

    pub fn mat_vec(&self, x: &[Complex<T>]) -> Result<Vec<Complex<T>>> {
        if x.len() != self.cols {
            return Err(Error::shape(self.cols, x.len()));
        }
        Ok(self
            .data
            .chunks_exact(self.cols)
            .map(|row| {
                row.iter()
                    .zip(x)
                    .fold(Complex::new(T::zero(), T::zero()), |acc, (a, b)| {
                        acc + a * b
                    })
            })
            .collect())
    }

    /// Largest entry-wise modulus of `self - self^H`.
    pub fn hermitian_defect(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }
}

impl<T> std::ops::Index<(usize, usize)> for ComplexMatrix<T> {
    type Output = Complex<T>;
    fn index(&self, (i, j): (usize, usize)) -> &Complex<T> {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for ComplexMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L L^H`.
#[derive(Debug, Clone)]
pub struct Cholesky<T> {
    factor: ComplexMatrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Factors a Hermitian positive-definite matrix. Only the lower triangle is read.
    pub fn new(a: &ComplexMatrix<T>) -> Result<Self> {
        let n = a.rows();
        if a.cols() != n {
            return Err(Error::shape(
                "square matrix",
                format!("{}x{}", a.rows(), a.cols()),
            ));
        }
        let mut l = ComplexMatrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)].re;
            for p in 0..j {
                diag = diag - l[(j, p)].norm_sqr();
            }
            if !(diag > T::zero()) || !diag.is_finite() {
                return Err(Error::Numerical(format!(
                    "matrix is not positive definite (pivot {j} = {diag})"
                )));
            }
            let d = diag.sqrt();
            l[(j, j)] = Complex::new(d, T::zero());
            for i in (j + 1)..n {
                let mut s = a[(i, j)];
                for p in 0..j {
                    s = s - l[(i, p)] * l[(j, p)].conj();
                }
                l[(i, j)] = s / d;
            }
        }
        Ok(Self { factor: l })
    }

    /// Solves `A X = B` for every column of `b`.
    pub fn solve(&self, b: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>> {
        let n = self.factor.rows();
        if b.rows() != n {
            return Err(Error::shape(n, b.rows()));
        }
        let l = &self.factor;
        let mut x = b.clone();
        for c in 0..b.cols() {
            // forward: L y = b
            for i in 0..n {
                let mut s = x[(i, c)];
                for p in 0..i {
                    s = s - l[(i, p)] * x[(p, c)];
                }
                x[(i, c)] = s / l[(i, i)].re;
            }
            // backward: L^H x = y
            for i in (0..n).rev() {
                let mut s = x[(i, c)];
                for p in (i + 1)..n {
                    s = s - l[(p, i)].conj() * x[(p, c)];
                }
                x[(i, c)] = s / l[(i, i)].re;
            }
        }
        Ok(x)
    }
}

/// Sample covariance `(1/N) sum h h^H` of equal-length complex vectors.
///
/// Accumulated through real GEMMs on the real/imaginary split and made
/// exactly Hermitian from the upper triangle.
pub fn sample_covariance<T: Scalar>(samples: &[Vec<Complex<T>>]) -> Result<ComplexMatrix<T>> {
    let first = samples
        .first()
        .ok_or_else(|| Error::InvalidArgument("covariance of an empty sample set".into()))?;
    let m = first.len();
    let mut re_acc = vec![T::zero(); m * m];
    let mut im_acc = vec![T::zero(); m * m];
    const CHUNK: usize = 2048;
    for chunk in samples.chunks(CHUNK) {
        let rows = chunk.len();
        let mut a = Vec::with_capacity(rows * m);
        let mut b = Vec::with_capacity(rows * m);
        for h in chunk {
            if h.len() != m {
                return Err(Error::shape(m, h.len()));
            }
            a.extend(h.iter().map(|z| z.re));
            b.extend(h.iter().map(|z| z.im));
        }
        // Re R = A^T A + B^T B ; Im R = B^T A - A^T B
        gemm(
            Op::T,
            Op::N,
            m,
            m,
            rows,
            T::one(),
            &a,
            &a,
            T::one(),
            &mut re_acc,
        );
        gemm(
            Op::T,
            Op::N,
            m,
            m,
            rows,
            T::one(),
            &b,
            &b,
            T::one(),
            &mut re_acc,
        );
        gemm(
            Op::T,
            Op::N,
            m,
            m,
            rows,
            T::one(),
            &b,
            &a,
            T::one(),
            &mut im_acc,
        );
        gemm(
            Op::T,
            Op::N,
            m,
            m,
            rows,
            -T::one(),
            &a,
            &b,
            T::one(),
            &mut im_acc,
        );
    }
    let scale = T::one() / T::from_usize(samples.len()).expect("sample count fits in scalar");
    let mut r = ComplexMatrix::zeros(m, m);
    for i in 0..m {
        r[(i, i)] = Complex::new(re_acc[i * m + i] * scale, T::zero());
        for j in (i + 1)..m {
            let z = Complex::new(re_acc[i * m + j], im_acc[i * m + j]) * scale;
            r[(i, j)] = z;
            r[(j, i)] = z.conj();
        }
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn cholesky_solves_hermitian_system() {
        let a = ComplexMatrix::from_vec(
            2,
            2,
            vec![c(4.0, 0.0), c(1.0, -1.0), c(1.0, 1.0), c(3.0, 0.0)],
        )
        .unwrap();
        let b = ComplexMatrix::from_vec(2, 1, vec![c(1.0, 2.0), c(-1.0, 0.5)]).unwrap();
        let x = Cholesky::new(&a).unwrap().solve(&b).unwrap();
        let back = a.mat_vec(&x.column(0)).unwrap();
        for (got, want) in back.iter().zip(b.column(0)) {
            assert!((got - want).norm() < 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = ComplexMatrix::from_vec(
            2,
            2,
            vec![c(1.0, 0.0), c(2.0, 0.0), c(2.0, 0.0), c(1.0, 0.0)],
        )
        .unwrap();
        assert!(matches!(Cholesky::new(&a), Err(Error::Numerical(_))));
    }

    #[test]
    fn covariance_of_repeated_vector_is_outer_product() {
        let v = vec![c(1.0, 2.0), c(-0.5, 0.25), c(0.0, 1.0)];
        let r = sample_covariance(&vec![v.clone(); 5]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = v[i] * v[j].conj();
                assert!((r[(i, j)] - want).norm() < 1e-12);
            }
        }
        assert_eq!(r.hermitian_defect(), 0.0);
    }

    #[test]
    fn covariance_rejects_empty_and_ragged() {
        assert!(sample_covariance::<f64>(&[]).is_err());
        assert!(sample_covariance(&[vec![c(1.0, 0.0)], vec![c(1.0, 0.0), c(0.0, 0.0)]]).is_err());
    }
}
