//! Floating point abstraction so the network can run in `f32` for training
//! and in `f64` for numerical gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Send
    + Sync
    + 'static
{
    /// Raw strided GEMM, `C = alpha * A * B + beta * C` with A `m x k`, B `k x n`.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping regions.
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
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
}

impl Scalar for f64 {
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

/// Row-major (optionally strided) matrix view used by [`gemm`].
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Distance between consecutive rows in `data`.
    pub row_stride: usize,
    /// Distance between consecutive columns in `data`.
    pub col_stride: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    /// `data` holds a dense row-major `rows x cols` matrix.
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols)
    }

    /// A `rows x cols` block whose rows start `row_stride` elements apart.
    pub fn strided(data: &'a [T], rows: usize, cols: usize, row_stride: usize) -> Self {
        assert!(cols <= row_stride || rows <= 1, "row stride shorter than a row");
        Self::general(data, rows, cols, row_stride, 1)
    }

    /// Arbitrary row and column strides. Only the extent is checked.
    pub fn general(data: &'a [T], rows: usize, cols: usize, row_stride: usize, col_stride: usize) -> Self {
        assert!(
            rows == 0 || cols == 0 || data.len() > (rows - 1) * row_stride + (cols - 1) * col_stride,
            "matrix view out of bounds"
        );
        Self { data, rows, cols, row_stride, col_stride, transposed: false }
    }

    pub fn t(self) -> Self {
        Self { transposed: !self.transposed, ..self }
    }

    fn shape(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        let (r, c) = (self.row_stride as isize, self.col_stride as isize);
        if self.transposed {
            (c, r)
        } else {
            (r, c)
        }
    }
}

/// `out = alpha * a * b + beta * out`, with `out` dense row-major.
pub fn gemm<T: Scalar>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T]) {
    let n = b.shape().1;
    gemm_into(alpha, a, b, beta, out, n);
}

/// Like [`gemm`], but output rows start `out_stride` elements apart.
pub fn gemm_into<T: Scalar>(alpha: T, a: Mat<'_, T>, b: Mat<'_, T>, beta: T, out: &mut [T], out_stride: usize) {
    assert!(b.shape().1 <= out_stride || a.shape().0 <= 1, "output stride shorter than a row");
    gemm_general(alpha, a, b, beta, out, out_stride, 1);
}

/// Like [`gemm`], with arbitrary output row and column strides. The output
/// positions must not alias each other.
pub fn gemm_general<T: Scalar>(
    alpha: T,
    a: Mat<'_, T>,
    b: Mat<'_, T>,
    beta: T,
    out: &mut [T],
    out_row_stride: usize,
    out_col_stride: usize,
) {
    let (m, k) = a.shape();
    let (k2, n) = b.shape();
    assert_eq!(k, k2, "inner dimensions differ");
    if m == 0 || n == 0 {
        return;
    }
    assert!(out.len() > (m - 1) * out_row_stride + (n - 1) * out_col_stride, "output buffer too small");
    if k == 0 {
        for r in 0..m {
            for c in 0..n {
                let v = &mut out[r * out_row_stride + c * out_col_stride];
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: every view was bounds-checked on construction, the output
    // extent is checked above, and `out` is exclusively borrowed.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            out_row_stride as isize,
            out_col_stride as isize,
        );
    }
}

/// Dense transpose of a row-major `rows x cols` matrix, in cache-sized tiles.
pub fn transpose<T: Scalar>(src: &[T], rows: usize, cols: usize) -> Vec<T> {
    assert_eq!(src.len(), rows * cols, "transpose shape mismatch");
    const TILE: usize = 32;
    let mut out = vec![T::zero(); rows * cols];
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
    out
}

/// Sum with independent partial accumulators so the loop vectorizes.
pub fn fast_sum<T: Scalar>(values: &[T]) -> T {
    let mut acc = [T::zero(); 16];
    let chunks = values.chunks_exact(16);
    let tail = chunks.remainder();
    for c in chunks {
        for i in 0..16 {
            acc[i] += c[i];
        }
    }
    let mut s = T::zero();
    for a in acc {
        s += a;
    }
    for &v in tail {
        s += v;
    }
    s
}

/// Dot product with independent partial accumulators.
pub fn fast_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 16];
    let ca = a.chunks_exact(16);
    let cb = b.chunks_exact(16);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..16 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = T::zero();
    for v in acc {
        s += v;
    }
    for (&x, &y) in ta.iter().zip(tb) {
        s += x * y;
    }
    s
}
