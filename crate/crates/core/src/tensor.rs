//! Dense row-major matrices; vectors are 1xN.

use crate::scalar::Scalar;
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F: Scalar> {
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> Tensor<F> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![F::zero(); rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: F) -> Self {
        Tensor { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<F>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length must equal rows*cols");
        Tensor { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&v| F::from_f64(v)));
        }
        Tensor { rows: r, cols: c, data }
    }

    /// Entries drawn i.i.d. uniform from [lo, hi).
    pub fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols).map(|_| F::from_f64(rng.gen_range(lo..hi))).collect();
        Tensor { rows, cols, data }
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
    pub fn len(&self) -> usize {
        self.data.len()
    }
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    #[inline]
    pub fn data(&self) -> &[F] {
        &self.data
    }
    #[inline]
    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> F {
        self.data[r * self.cols + c]
    }
    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: F) {
        self.data[r * self.cols + c] = v;
    }
    #[inline]
    pub fn row(&self, r: usize) -> &[F] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [F] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn scalar(&self) -> F {
        assert_eq!(self.data.len(), 1, "scalar() on non-1x1 tensor");
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Tensor { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn add_assign(&mut self, other: &Tensor<F>) {
        debug_assert_eq!(self.shape(), other.shape());
        for (d, s) in self.data.iter_mut().zip(&other.data) {
            *d = *d + *s;
        }
    }

    pub fn scale_assign(&mut self, s: F) {
        for d in self.data.iter_mut() {
            *d = *d * s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sq_sum(&self) -> f64 {
        self.data.iter().map(|v| v.into_f64() * v.into_f64()).sum()
    }

    /// C <- alpha*op(A)*op(B) + beta*C, where op is an optional transpose.
    /// Transposes cost nothing: they swap strides on the gemm call.
    pub fn gemm_into(
        c: &mut Tensor<F>,
        alpha: F,
        a: &Tensor<F>,
        trans_a: bool,
        b: &Tensor<F>,
        trans_b: bool,
        beta: F,
    ) {
        let (m, ka) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
        let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
        assert_eq!(ka, kb, "gemm inner dimension mismatch");
        assert_eq!([c.rows, c.cols], [m, n], "gemm output shape mismatch");
        let (rsa, csa) = if trans_a { (1, a.cols as isize) } else { (a.cols as isize, 1) };
        let (rsb, csb) = if trans_b { (1, b.cols as isize) } else { (b.cols as isize, 1) };
        unsafe {
            F::gemm(
                m,
                ka,
                n,
                alpha,
                a.data.as_ptr(),
                rsa,
                csa,
                b.data.as_ptr(),
                rsb,
                csb,
                beta,
                c.data.as_mut_ptr(),
                c.cols as isize,
                1,
            );
        }
    }

    pub fn matmul(a: &Tensor<F>, b: &Tensor<F>) -> Tensor<F> {
        let mut c = Tensor::zeros(a.rows, b.cols);
        Self::gemm_into(&mut c, F::one(), a, false, b, false, F::zero());
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_hand_case() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let b = Tensor::<f64>::from_rows(&[vec![1.0], vec![1.0]]);
        let c = Tensor::matmul(&a, &b);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn gemm_transpose_flags_match_naive() {
        let a = Tensor::<f64>::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        // a^T * a is 3x3 symmetric
        let mut c = Tensor::zeros(3, 3);
        Tensor::gemm_into(&mut c, 1.0, &a, true, &a, false, 0.0);
        assert_eq!(c.at(0, 1), 1.0 * 2.0 + 4.0 * 5.0);
        assert_eq!(c.at(1, 0), c.at(0, 1));
        // a * a^T is 2x2
        let mut d = Tensor::zeros(2, 2);
        Tensor::gemm_into(&mut d, 1.0, &a, false, &a, true, 0.0);
        assert_eq!(d.at(0, 0), 14.0);
        assert_eq!(d.at(0, 1), 32.0);
    }

    #[test]
    fn f32_path_works() {
        let a = Tensor::<f32>::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]);
        let c = Tensor::matmul(&a, &a);
        assert_eq!(c.at(0, 0), 4.0f32);
        assert_eq!(c.at(1, 1), 4.0f32);
    }
}
