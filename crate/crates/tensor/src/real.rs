use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::vecmath;

/// Scalar element type of a tensor: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// `c = alpha * a * b + beta * c` over strided row/column layouts.
    ///
    /// # Safety
    /// Every pointer/stride combination must address memory inside the
    /// corresponding allocation for the given `m`, `k`, `n`.
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
        self.to_f64().expect("real converts to f64")
    }

    fn exp_in_place(xs: &mut [Self]) {
        for x in xs {
            *x = x.exp();
        }
    }

    fn gelu_into(xs: &[Self], out: &mut [Self]) {
        for (o, &x) in out.iter_mut().zip(xs) {
            *o = crate::kernels::gelu(x);
        }
    }

    /// `dx += g * gelu'(x)`.
    fn gelu_grad_accumulate(xs: &[Self], g: &[Self], dx: &mut [Self]) {
        for ((d, &x), &gv) in dx.iter_mut().zip(xs).zip(g) {
            *d += gv * crate::kernels::gelu_grad(x);
        }
    }

    fn all_finite(xs: &[Self]) -> bool {
        xs.iter().all(|v| v.is_finite())
    }
}

impl Real for f32 {
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }

    fn exp_in_place(xs: &mut [Self]) {
        vecmath::exp_slice(xs);
    }

    fn gelu_into(xs: &[Self], out: &mut [Self]) {
        vecmath::gelu_slice(xs, out);
    }

    fn gelu_grad_accumulate(xs: &[Self], g: &[Self], dx: &mut [Self]) {
        vecmath::gelu_grad_slice(xs, g, dx);
    }

    fn all_finite(xs: &[Self]) -> bool {
        vecmath::all_finite(xs)
    }
}

impl Real for f64 {
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}
