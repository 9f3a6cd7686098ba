use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A strided view into a flat buffer describing a `rows × cols` matrix.
#[derive(Clone, Copy, Debug)]
pub struct MatView {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl MatView {
    /// Row-major contiguous `rows × cols`.
    pub fn dense(rows: usize, cols: usize) -> Self {
        MatView { offset: 0, rows, cols, row_stride: cols, col_stride: 1 }
    }

    /// The transpose of a row-major contiguous `rows × cols` matrix.
    pub fn dense_t(rows: usize, cols: usize) -> Self {
        MatView { offset: 0, rows: cols, cols: rows, row_stride: 1, col_stride: cols }
    }

    pub fn at(mut self, offset: usize) -> Self {
        self.offset = offset;
        self
    }

    fn last_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return self.offset;
        }
        self.offset + (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
    }
}

/// Floating-point element type. `f32` is used for training, `f64` for
/// gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + 'static
{
    /// Short dtype tag, e.g. `"f32"`.
    const DTYPE: &'static str;

    /// `c ← a·b + beta·c` on strided views. Single-threaded with a fixed
    /// blocking order, so results are reproducible on a given build.
    fn gemm_raw(a: &[Self], av: MatView, b: &[Self], bv: MatView, c: &mut [Self], cv: MatView, beta: Self);

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn check_views(a_len: usize, av: &MatView, b_len: usize, bv: &MatView, c_len: usize, cv: &MatView) {
    assert_eq!(av.cols, bv.rows, "gemm inner dimension");
    assert_eq!(av.rows, cv.rows, "gemm output rows");
    assert_eq!(bv.cols, cv.cols, "gemm output cols");
    if av.rows * av.cols > 0 {
        assert!(av.last_index() < a_len, "gemm: view a out of bounds");
    }
    if bv.rows * bv.cols > 0 {
        assert!(bv.last_index() < b_len, "gemm: view b out of bounds");
    }
    if cv.rows * cv.cols > 0 {
        assert!(cv.last_index() < c_len, "gemm: view c out of bounds");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $tag:literal, $gemm:path) => {
        impl Scalar for $t {
            const DTYPE: &'static str = $tag;

            fn gemm_raw(a: &[Self], av: MatView, b: &[Self], bv: MatView, c: &mut [Self], cv: MatView, beta: Self) {
                check_views(a.len(), &av, b.len(), &bv, c.len(), &cv);
                if cv.rows == 0 || cv.cols == 0 {
                    return;
                }
                if av.cols == 0 {
                    for i in 0..cv.rows {
                        for j in 0..cv.cols {
                            let idx = cv.offset + i * cv.row_stride + j * cv.col_stride;
                            c[idx] = if beta == 0.0 { 0.0 } else { beta * c[idx] };
                        }
                    }
                    return;
                }
                // SAFETY: every index touched by the kernel is bounded by the
                // last_index checks above; c does not alias a or b.
                unsafe {
                    $gemm(
                        av.rows,
                        av.cols,
                        bv.cols,
                        1.0,
                        a.as_ptr().add(av.offset),
                        av.row_stride as isize,
                        av.col_stride as isize,
                        b.as_ptr().add(bv.offset),
                        bv.row_stride as isize,
                        bv.col_stride as isize,
                        beta,
                        c.as_mut_ptr().add(cv.offset),
                        cv.row_stride as isize,
                        cv.col_stride as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Shorthand for literal constants in generic code.
#[inline]
pub fn sc<T: Scalar>(v: f64) -> T {
    T::from_f64_lossy(v)
}
