//! Dense row-major matrices and a thin strided GEMM wrapper.
//!
//! Everything in the transformer is expressed as 2-D matrices: token
//! sequences are `tokens × channels`, and per-head slices are strided column
//! blocks of the projection outputs. `matrixmultiply` handles arbitrary
//! strides, so transposes and head splits never copy.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the model can run in.
///
/// Training runs in `f32`; gradient checking runs the same code in `f64`.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Debug
    + Default
    + Send
    + Sync
    + 'static
{
    /// # Safety
    /// Same contract as `matrixmultiply::sgemm`: every addressed element of
    /// `a`, `b` and `c` must be in bounds.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Numerically stable in-place softmax of one row.
    fn softmax_in_place(row: &mut [Self]) {
        let max = row.iter().copied().fold(Self::neg_infinity(), |m, v| if v > m { v } else { m });
        let mut sum = Self::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        let inv = Self::one() / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Branch-free `exp` for `x <= 0`, within a few ulp of `f32::exp` down to
/// `-87`; smaller inputs give a value below `1e-37` instead of an
/// underflowing result.
#[inline(always)]
fn exp_nonpositive(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_145_75;
    const LN2_LO: f32 = 1.428_606_8e-6;
    // Adding 1.5·2²³ rounds to nearest and leaves the integer in the low mantissa bits.
    const SHIFTER: f32 = 12_582_912.0;
    let x = x.max(-87.0);
    let shifted = x * LOG2E + SHIFTER;
    let n = shifted - SHIFTER;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0 + r * (0.5 + r * (1.0 / 6.0 + r * (1.0 / 24.0 + r * (1.0 / 120.0 + r * (1.0 / 720.0))))));
    let ni = shifted.to_bits().wrapping_sub(SHIFTER.to_bits());
    p * f32::from_bits(ni.wrapping_add(127) << 23)
}

impl Real for f32 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn softmax_in_place(row: &mut [f32]) {
        // Eight independent lanes let the reductions vectorise.
        let mut lanes = [f32::NEG_INFINITY; 8];
        let mut chunks = row.chunks_exact(8);
        for c in &mut chunks {
            for k in 0..8 {
                lanes[k] = lanes[k].max(c[k]);
            }
        }
        let max = chunks.remainder().iter().copied().fold(lanes.into_iter().fold(f32::NEG_INFINITY, f32::max), f32::max);
        for v in row.iter_mut() {
            *v = exp_nonpositive(*v - max);
        }
        let mut acc = [0f32; 8];
        let mut chunks = row.chunks_exact(8);
        for c in &mut chunks {
            for k in 0..8 {
                acc[k] += c[k];
            }
        }
        let sum: f32 = acc.iter().sum::<f32>() + chunks.remainder().iter().sum::<f32>();
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

impl Real for f64 {
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Borrowed strided matrix.
#[derive(Clone, Copy, Debug)]
pub struct View<'a, T> {
    data: &'a [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> View<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "view shape does not match buffer");
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn t(self) -> Self {
        Self { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs, ..self }
    }

    /// Columns `[start, start + width)`.
    pub fn cols_range(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        Self { offset: self.offset + start * self.cs, cols: width, ..self }
    }

    /// Rows `[start, start + height)`.
    pub fn rows_range(self, start: usize, height: usize) -> Self {
        assert!(start + height <= self.rows);
        Self { offset: self.offset + start * self.rs, rows: height, ..self }
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[self.offset + r * self.rs + c * self.cs]
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// Mutable strided matrix, used as the GEMM destination.
#[derive(Debug)]
pub struct ViewMut<'a, T> {
    data: &'a mut [T],
    offset: usize,
    rows: usize,
    cols: usize,
    rs: usize,
    cs: usize,
}

impl<'a, T: Real> ViewMut<'a, T> {
    pub fn new(data: &'a mut [T], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "view shape does not match buffer");
        Self { data, offset: 0, rows, cols, rs: cols, cs: 1 }
    }

    pub fn cols_range(self, start: usize, width: usize) -> Self {
        assert!(start + width <= self.cols);
        Self { offset: self.offset + start * self.cs, cols: width, ..self }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = self.offset + (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "strided view out of bounds");
        }
    }
}

/// `c = alpha · a · b + beta · c`.
pub fn gemm<T: Real>(alpha: T, a: View<'_, T>, b: View<'_, T>, beta: T, c: ViewMut<'_, T>) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension mismatch");
    assert_eq!(a.rows, c.rows, "gemm row mismatch");
    assert_eq!(b.cols, c.cols, "gemm column mismatch");
    a.check();
    b.check();
    c.check();
    if c.rows == 0 || c.cols == 0 {
        return;
    }
    // SAFETY: all three views were bounds-checked above for their full extent.
    unsafe {
        T::gemm_raw(
            a.rows,
            a.cols,
            b.cols,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.offset),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.data.as_mut_ptr().add(c.offset),
            c.rs as isize,
            c.cs as isize,
        )
    }
}

/// Owned row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix buffer has wrong length");
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

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn view(&self) -> View<'_, T> {
        View::new(&self.data, self.rows, self.cols)
    }

    pub fn view_mut(&mut self) -> ViewMut<'_, T> {
        ViewMut::new(&mut self.data, self.rows, self.cols)
    }

    /// `a · b` into a fresh matrix.
    pub fn matmul(a: View<'_, T>, b: View<'_, T>) -> Self {
        let mut out = Self::zeros(a.rows(), b.cols());
        gemm(T::one(), a, b, T::zero(), out.view_mut());
        out
    }

    pub fn map<U: Real>(&self, f: impl Fn(T) -> U) -> Mat<U> {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }
}

/// Converts between float widths (f32 checkpoints to f64 gradient checks and back).
pub fn cast_slice<A: Real, B: Real>(src: &[A]) -> Vec<B> {
    src.iter().map(|&v| B::from_f64(v.as_f64()).expect("finite cast")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_is_close_to_std() {
        let mut worst = 0.0f64;
        for i in 0..=200_000 {
            let x = -87.0 * i as f32 / 200_000.0;
            let want = (x as f64).exp();
            let got = exp_nonpositive(x) as f64;
            worst = worst.max((got - want).abs() / want);
        }
        assert!(worst < 1e-6, "{worst}");
        assert_eq!(exp_nonpositive(0.0), 1.0);
        assert!(exp_nonpositive(-1000.0) < 1e-37);
    }

    #[test]
    fn softmax_paths_agree() {
        let row: Vec<f32> = (0..50).map(|i| ((i * 37) % 23) as f32 * 0.7 - 5.0).collect();
        let mut a = row.clone();
        f32::softmax_in_place(&mut a);
        let mut b: Vec<f64> = row.iter().map(|&v| v as f64).collect();
        f64::softmax_in_place(&mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((*x as f64 - y).abs() < 1e-7);
        }
    }

    fn naive(a: &Mat<f64>, b: &Mat<f64>) -> Mat<f64> {
        let mut out = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out.as_mut_slice()[i * b.cols() + j] = s;
            }
        }
        out
    }

    fn filled(rows: usize, cols: usize, seed: f64) -> Mat<f64> {
        let data = (0..rows * cols).map(|i| ((i as f64 + seed) * 0.37).sin()).collect();
        Mat::from_vec(rows, cols, data)
    }

    #[test]
    fn matmul_matches_naive() {
        let a = filled(5, 7, 0.0);
        let b = filled(7, 3, 1.0);
        let fast = Mat::matmul(a.view(), b.view());
        let slow = naive(&a, &b);
        for (x, y) in fast.as_slice().iter().zip(slow.as_slice()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_and_column_block_views() {
        let a = filled(6, 4, 2.0);
        let b = filled(6, 8, 3.0);
        // aᵀ · b[:, 2..5]
        let got = Mat::matmul(a.view().t(), b.view().cols_range(2, 3));
        for i in 0..4 {
            for j in 0..3 {
                let want: f64 = (0..6).map(|k| a.get(k, i) * b.get(k, j + 2)).sum();
                assert!((got.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulate_into_column_block() {
        let a = filled(3, 2, 0.5);
        let b = filled(2, 2, 1.5);
        let mut c = Mat::<f64>::zeros(3, 5);
        gemm(1.0, a.view(), b.view(), 0.0, c.view_mut().cols_range(3, 2));
        let want = naive(&a, &b);
        for i in 0..3 {
            assert_eq!(c.get(i, 0), 0.0);
            assert!((c.get(i, 3) - want.get(i, 0)).abs() < 1e-12);
            assert!((c.get(i, 4) - want.get(i, 1)).abs() < 1e-12);
        }
    }
}
