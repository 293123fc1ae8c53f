use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type the tensor engine and the model are generic over.
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
    /// Converts an `f64` constant; exact for `f64`, rounded for `f32`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite scalar")
    }

    /// `c += a b` for an `m x k` by `k x n` product, each operand given as
    /// a slice plus `(row stride, column stride)`.
    fn gemm(m: usize, k: usize, n: usize, a: (&[Self], Strides), b: (&[Self], Strides), c: (&mut [Self], Strides)) {
        let (a, (ra, ca)) = a;
        let (b, (rb, cb)) = b;
        let (c, (rc, cc)) = c;
        for i in 0..m {
            for p in 0..k {
                let av = a[i * ra + p * ca];
                for j in 0..n {
                    c[i * rc + j * cc] += av * b[p * rb + j * cb];
                }
            }
        }
    }
}

/// `(row stride, column stride)` of a dense matrix view.
pub type Strides = (usize, usize);

fn check_view(len: usize, rows: usize, cols: usize, (r, c): Strides) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * r + (cols - 1) * c < len, "matrix view exceeds its buffer");
    }
}

macro_rules! blas_gemm {
    ($t:ty, $f:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, a: (&[Self], Strides), b: (&[Self], Strides), c: (&mut [Self], Strides)) {
                if m == 0 || n == 0 || k == 0 {
                    return;
                }
                check_view(a.0.len(), m, k, a.1);
                check_view(b.0.len(), k, n, b.1);
                check_view(c.0.len(), m, n, c.1);
                let s = |x: usize| x as isize;
                // SAFETY: every view was checked to lie inside its slice, and
                // `c` is borrowed mutably so it cannot alias `a` or `b`.
                unsafe {
                    $f(
                        m, k, n, 1.0,
                        a.0.as_ptr(), s(a.1 .0), s(a.1 .1),
                        b.0.as_ptr(), s(b.1 .0), s(b.1 .1),
                        1.0,
                        c.0.as_mut_ptr(), s(c.1 .0), s(c.1 .1),
                    );
                }
            }
        }
    };
}

blas_gemm!(f32, matrixmultiply::sgemm);
blas_gemm!(f64, matrixmultiply::dgemm);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literals_round_trip() {
        assert_eq!(f64::lit(0.25), 0.25);
        assert_eq!(f32::lit(0.5), 0.5f32);
        assert_eq!(f64::from_usize_lossy(7).as_f64(), 7.0);
    }

    #[test]
    fn gemm_accumulates_with_strides() {
        // [[1, 2], [3, 4]] times the transpose of [[5, 6], [7, 8]], added to ones.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [1.0f64; 4];
        f64::gemm(2, 2, 2, (&a, (2, 1)), (&b, (1, 2)), (&mut c, (2, 1)));
        assert_eq!(c, [18.0, 24.0, 40.0, 54.0]);
        let mut c32 = [1.0f32; 4];
        f32::gemm(2, 2, 2, (&[1.0, 2.0, 3.0, 4.0], (2, 1)), (&[5.0, 6.0, 7.0, 8.0], (1, 2)), (&mut c32, (2, 1)));
        assert_eq!(c32, [18.0, 24.0, 40.0, 54.0]);
    }
}
