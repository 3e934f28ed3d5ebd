//! Scalar abstraction shared by every kernel.
//!
//! Compute runs in `f32`; `f64` is used for gradient certification. Both
//! dispatch their matrix products to the packed GEMM kernels of
//! `matrixmultiply`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Strided read-only view of a row-major or transposed matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride: cols,
            col_stride: 1,
        }
    }

    /// The transpose of this view; no data moves.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Real scalar type usable as tensor element.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// `c = a·b` (or `c += a·b` when `accumulate`), `c` row-major `(a.rows, b.cols)`.
    fn gemm(a: MatRef<'_, Self>, b: MatRef<'_, Self>, c: &mut [Self], accumulate: bool);

    fn from_f64_lossy(x: f64) -> Self {
        Self::from_f64(x).expect("finite f64 converts to every scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_gemm<T>(a: &MatRef<'_, T>, b: &MatRef<'_, T>, c: &[T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions differ");
    assert!(
        a.rows * a.cols == 0 || a.max_offset() < a.data.len(),
        "gemm: lhs view out of bounds"
    );
    assert!(
        b.rows * b.cols == 0 || b.max_offset() < b.data.len(),
        "gemm: rhs view out of bounds"
    );
    assert_eq!(c.len(), a.rows * b.cols, "gemm output has wrong length");
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(a: MatRef<'_, $t>, b: MatRef<'_, $t>, c: &mut [$t], accumulate: bool) {
                check_gemm(&a, &b, c);
                let (m, k, n) = (a.rows, a.cols, b.cols);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c.fill(0.0);
                    }
                    return;
                }
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: every index reachable through the strides was bounds-checked
                // in `check_gemm`, and `c` is an exclusive slice of length m·n.
                unsafe {
                    $kernel(
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
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Converts a small constant into any scalar type.
#[inline]
pub(crate) fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64_lossy(x)
}

const LANES: usize = 8;

#[inline]
fn reduce_lanes<T: Scalar>(acc: [T; LANES]) -> T {
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
}

/// Sum with eight interleaved accumulators; the order is fixed, so results
/// are reproducible, but they differ from a left-to-right fold.
pub(crate) fn lane_sum<T: Scalar>(x: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    tail.iter().fold(reduce_lanes(acc), |s, &v| s + v)
}

/// Dot product with the accumulation order of [`lane_sum`].
pub(crate) fn lane_dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    ta.iter()
        .zip(tb)
        .fold(reduce_lanes(acc), |s, (&x, &y)| s + x * y)
}

/// Largest entry; NaN-free input assumed.
pub(crate) fn lane_max<T: Scalar>(x: &[T]) -> T {
    let mut acc = [T::neg_infinity(); LANES];
    let chunks = x.chunks_exact(LANES);
    let tail = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] = if c[l] > acc[l] { c[l] } else { acc[l] };
        }
    }
    let m = acc
        .iter()
        .copied()
        .fold(T::neg_infinity(), |a, b| if b > a { b } else { a });
    tail.iter()
        .copied()
        .fold(m, |a, b| if b > a { b } else { a })
}
