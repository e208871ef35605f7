//! Floating-point scalar abstraction used by every numeric routine in the crate.
//!
//! Model code is written once against [`Scalar`]; `f32` is the storage type for
//! training runs and `f64` is used where finite differences need the headroom.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Row-major view of a matrix operand for [`Scalar::gemm`].
///
/// `row_stride`/`col_stride` are element strides, so a transposed operand is
/// expressed by swapping them.
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, S> MatRef<'a, S> {
    pub fn row_major(data: &'a [S], rows: usize, cols: usize) -> Self {
        MatRef { data, rows, cols, row_stride: cols, col_stride: 1 }
    }

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
            0
        } else {
            (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride
        }
    }
}

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Short type name recorded in reports.
    const NAME: &'static str;

    /// `c = alpha * a * b + beta * c` where `c` is a dense row-major `a.rows x b.cols` block.
    fn gemm(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]);

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every float scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float scalar converts to f64")
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_f64_lossy(v as f64)
    }
}

fn check_gemm_operands<S>(a: &MatRef<'_, S>, b: &MatRef<'_, S>, c_len: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions disagree");
    assert_eq!(c_len, a.rows * b.cols, "gemm output buffer has the wrong length");
    assert!(a.rows == 0 || a.cols == 0 || a.max_offset() < a.data.len(), "gemm lhs view out of bounds");
    assert!(b.rows == 0 || b.cols == 0 || b.max_offset() < b.data.len(), "gemm rhs view out of bounds");
}

macro_rules! impl_scalar {
    ($ty:ty, $name:literal, $kernel:path) => {
        impl Scalar for $ty {
            const NAME: &'static str = $name;

            fn gemm(alpha: Self, a: MatRef<'_, Self>, b: MatRef<'_, Self>, beta: Self, c: &mut [Self]) {
                check_gemm_operands(&a, &b, c.len());
                let (m, k, n) = (a.rows, a.cols, b.cols);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every view was bounds-checked above; `c` is dense row-major m x n
                // and does not alias the read-only operands.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
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

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);
