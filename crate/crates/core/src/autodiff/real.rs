// SPDX-License-Identifier: MIT OR Apache-2.0

//! Scalar trait for tape values.
//!
//! Production paths run in `f32`. The `f64` instantiation exists so that
//! finite-difference checks are not swamped by single-precision rounding.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating point element type usable on a computation tape.
pub trait Real: Float + FromPrimitive + Default + Debug + Sum + Send + Sync + 'static {
    /// `c = alpha * op(a) * op(b) + beta * c` on strided row-major buffers.
    ///
    /// Strides are given as (row stride, column stride) for each operand, so a
    /// transposed operand is expressed by swapping its strides.
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

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn span(rows: usize, cols: usize, strides: (usize, usize)) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * strides.0 + (cols - 1) * strides.1 + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
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
                assert!(a.len() >= span(m, k, a_strides), "gemm: lhs buffer too short");
                assert!(b.len() >= span(k, n, b_strides), "gemm: rhs buffer too short");
                assert!(c.len() >= span(m, n, c_strides), "gemm: output buffer too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the three assertions above guarantee that every
                // strided access performed by the kernel lies inside its slice.
                unsafe {
                    $kernel(
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);
