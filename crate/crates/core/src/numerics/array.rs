use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{shape_err, Error, Result};

/// Scalar type the compute core runs on: `f32` for training, `f64` for verification.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + 'static
{
    const DTYPE: &'static str;

    /// `c (+)= op(a) · op(b)` with `op(a)` of shape `m×k` and `op(b)` of shape `k×n`,
    /// all buffers row-major. A transposed operand is stored in its untransposed layout.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_trans: bool,
        b: &[Self],
        b_trans: bool,
        c: &mut [Self],
        accumulate: bool,
    );

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite conversion")
    }
}

fn gemm_strides(m: usize, k: usize, n: usize, a_trans: bool, b_trans: bool) -> [isize; 4] {
    let (rsa, csa) = if a_trans { (1, m) } else { (k, 1) };
    let (rsb, csb) = if b_trans { (1, k) } else { (n, 1) };
    [rsa as isize, csa as isize, rsb as isize, csb as isize]
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const DTYPE: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|x| *x = 0.0);
                    }
                    return;
                }
                let [rsa, csa, rsb, csb] = gemm_strides(m, k, n, a_trans, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: the asserts above guarantee every strided access stays in bounds.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Dense row-major array.
///
/// Every compute op views an array as a matrix: the last dimension is the
/// column count and all leading dimensions collapse into rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Array<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Array<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return shape_err(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: vec![T::zero(); shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Self {
            data: vec![value; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return shape_err("ragged rows");
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            data: (0..n).map(&mut f).collect(),
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(value: T) -> Self {
        Self {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of columns (the last dimension).
    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Product of all leading dimensions.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            r => self.shape[..r - 1].iter().product(),
        }
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols() + c]
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err(format!("cannot reshape {:?} to {shape:?}", self.shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Array<U> {
        Array {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64(x.as_f64()).expect("cast"))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what.to_string()))
        }
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self {
            shape: vec![c, r],
            data: out,
        }
    }

    pub(crate) fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter_mut()
            .zip(&other.data)
            .for_each(|(a, &b)| *a += b);
    }
}

/// `out[b, j] = Σ_i x[b, i] · weight[i, j] + bias[j]`.
pub fn linear_forward<T: Real>(x: &Array<T>, weight: &Array<T>, bias: &Array<T>) -> Result<Array<T>> {
    let (b, din) = (x.rows(), x.cols());
    if weight.shape().len() != 2 || weight.shape()[0] != din {
        return shape_err(format!(
            "linear: input has {din} features but weight is {:?}",
            weight.shape()
        ));
    }
    let dout = weight.shape()[1];
    if bias.len() != dout {
        return shape_err(format!("linear: bias has {} entries, expected {dout}", bias.len()));
    }
    let mut out = vec![T::zero(); b * dout];
    for r in 0..b {
        out[r * dout..(r + 1) * dout].copy_from_slice(bias.data());
    }
    T::gemm(b, din, dout, x.data(), false, weight.data(), false, &mut out, true);
    Array::new(vec![b, dout], out)
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &x| m.max(x));
    for x in row.iter_mut() {
        *x = (*x - max).exp();
    }
    // Ascending-order sum: the normalizer is permutation invariant.
    let mut sorted = row.to_vec();
    sorted.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let total = sorted.into_iter().fold(T::zero(), |acc, x| acc + x);
    for x in row.iter_mut() {
        *x = *x / total;
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows<T: Real>(x: &Array<T>) -> Array<T> {
    let mut out = x.clone();
    let c = out.cols();
    if c > 0 {
        out.data_mut().chunks_mut(c).for_each(softmax_in_place);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Array<f64>, b: &Array<f64>) -> Array<f64> {
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let mut out = Array::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(i, p) * b.at(p, j);
                }
                out.data_mut()[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let x = Array::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let eye = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let zero_bias = Array::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert_eq!(linear_forward(&x, &eye, &zero_bias).unwrap().data(), &[1.0, 2.0]);

        let zero_w = Array::<f64>::zeros(&[2, 2]);
        let bias = Array::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert_eq!(linear_forward(&x, &zero_w, &bias).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = Array::from_fn(&[4, 8], |_| rng.random_range(-1.0..1.0));
        let w = Array::from_fn(&[8, 3], |_| rng.random_range(-1.0..1.0));
        let b = Array::from_fn(&[3], |_| rng.random_range(-1.0..1.0));
        let got = linear_forward(&x, &w, &b).unwrap();
        let mut want = naive_matmul(&x, &w);
        for r in 0..4 {
            for c in 0..3 {
                want.data_mut()[r * 3 + c] += b.data()[c];
            }
        }
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_rejects_bad_shapes() {
        let x = Array::<f64>::zeros(&[2, 3]);
        let w = Array::<f64>::zeros(&[4, 2]);
        let b = Array::<f64>::zeros(&[2]);
        assert!(matches!(linear_forward(&x, &w, &b), Err(Error::Shape(_))));
        let w = Array::<f64>::zeros(&[3, 2]);
        let b = Array::<f64>::zeros(&[5]);
        assert!(matches!(linear_forward(&x, &w, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn gemm_transposes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Array::from_fn(&[5, 4], |_| rng.random_range(-1.0..1.0));
        let b = Array::from_fn(&[6, 4], |_| rng.random_range(-1.0..1.0));
        let want = naive_matmul(&a, &b.transpose());
        let mut got = vec![0.0; 30];
        f64::gemm(5, 4, 6, a.data(), false, b.data(), true, &mut got, false);
        for (g, w) in got.iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
        let want = naive_matmul(&a.transpose(), &a);
        let mut got = vec![0.0; 16];
        f64::gemm(4, 5, 4, a.data(), true, a.data(), false, &mut got, false);
        for (g, w) in got.iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let s = softmax_rows(&Array::from_rows(&[vec![0.0f64, 0.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let s = softmax_rows(&Array::from_rows(&[vec![1000.0f64, 1000.0]]).unwrap());
        assert_eq!(s.data(), &[0.5, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array::from_fn(&[3, 5], |_| rng.random_range(-5.0..5.0));
        let s = softmax_rows(&x);
        for r in 0..3 {
            let total: f64 = s.row(r).iter().sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arr(rows: usize, cols: usize) -> impl Strategy<Value = Array<f64>> {
            proptest::collection::vec(-10.0f64..10.0, rows * cols)
                .prop_map(move |d| Array::new(vec![rows, cols], d).unwrap())
        }

        proptest! {
            #[test]
            fn linear_is_affine(x in arr(3, 4), y in arr(3, 4), w in arr(4, 2), b in arr(1, 2), alpha in -3.0f64..3.0) {
                let b = b.reshaped(vec![2]).unwrap();
                let f = |v: &Array<f64>| linear_forward(v, &w, &b).unwrap();
                let mut xy = x.clone();
                xy.add_assign(&y);
                let (fx, fy, fxy) = (f(&x), f(&y), f(&xy));
                for i in 0..6 {
                    let lhs = fxy.data()[i];
                    let rhs = fx.data()[i] + fy.data()[i] - b.data()[i % 2];
                    prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
                }
                let fax = f(&x.map(|v| alpha * v));
                for i in 0..6 {
                    let rhs = alpha * fx.data()[i] + (1.0 - alpha) * b.data()[i % 2];
                    prop_assert!((fax.data()[i] - rhs).abs() < 1e-10 * (1.0 + rhs.abs()));
                }
            }

            #[test]
            fn softmax_rows_normalized_and_shift_invariant(x in arr(2, 6), shift in -50.0f64..50.0) {
                let s = softmax_rows(&x);
                let shifted = softmax_rows(&x.map(|v| v + shift));
                for r in 0..2 {
                    let total: f64 = s.row(r).iter().sum();
                    prop_assert!((total - 1.0).abs() < 1e-6);
                    for (a, b) in s.row(r).iter().zip(shifted.row(r)) {
                        prop_assert!(*a > 0.0 && *a <= 1.0);
                        prop_assert!((a - b).abs() < 1e-12);
                    }
                }
            }
        }
    }
}
