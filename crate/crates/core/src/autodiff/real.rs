use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};

/// Scalar element type. `f64` is the checked test precision, `f32` the fast
/// training precision.
pub trait Real:
    Float
    + FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    const NAME: &'static str;
    /// Reject non-finite values when tensors are created.
    const CHECKED: bool;
    const BYTES: usize;

    fn c(x: f64) -> Self;

    fn f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` for row/column strided matrices
    /// (a: m x k, b: k x n, c: m x n).
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

fn span(rows: usize, cols: usize, (rs, cs): (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $checked:expr, $gemm:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;
            const CHECKED: bool = $checked;
            const BYTES: usize = std::mem::size_of::<$t>();

            #[inline(always)]
            fn c(x: f64) -> Self {
                x as $t
            }

            #[inline(always)]
            fn f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                assert!(span(m, k, a_strides) <= a.len(), "gemm: lhs out of bounds");
                assert!(span(k, n, b_strides) <= b.len(), "gemm: rhs out of bounds");
                assert!(span(m, n, c_strides) <= c.len(), "gemm: output out of bounds");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: bounds of all three operands are asserted above and the
                // output does not alias the inputs (distinct borrows).
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                <$t>::from_le_bytes(bytes.try_into().expect("element width"))
            }
        }
    };
}

impl_real!(f64, "f64", true, matrixmultiply::dgemm);
impl_real!(f32, "f32", false, matrixmultiply::sgemm);
