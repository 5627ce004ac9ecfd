use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Element type of a [`Tensor`](super::Tensor). Training runs in `f32`,
/// gradient verification in `f64`.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static
{
    const NAME: &'static str;

    fn of(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` on strided views.
    ///
    /// # Safety
    /// All pointers must be valid for the index ranges implied by the
    /// dimensions and strides.
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
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }

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
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of(v: f64) -> Self {
        v
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }

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

/// A strided 2-D view into a slice: `(offset, row stride, column stride)`.
#[derive(Clone, Copy, Debug)]
pub struct View {
    pub offset: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub const fn row_major(offset: usize, cols: usize) -> Self {
        View {
            offset,
            rs: cols,
            cs: 1,
        }
    }

    /// The same storage read as its transpose.
    pub const fn t(self) -> Self {
        View {
            offset: self.offset,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn last_index(&self, rows: usize, cols: usize) -> usize {
        self.offset + (rows - 1) * self.rs + (cols - 1) * self.cs
    }
}

/// Bounds-checked wrapper over the strided GEMM kernels:
/// `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<S: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    av: View,
    b: &[S],
    bv: View,
    beta: S,
    c: &mut [S],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(cv.last_index(m, n) < c.len(), "gemm: c view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let at = cv.offset + i * cv.rs + j * cv.cs;
                c[at] = if beta == S::zero() { S::zero() } else { c[at] * beta };
            }
        }
        return;
    }
    assert!(av.last_index(m, k) < a.len(), "gemm: a view out of bounds");
    assert!(bv.last_index(k, n) < b.len(), "gemm: b view out of bounds");
    // SAFETY: every index reachable through the three views was checked above.
    unsafe {
        S::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr().add(av.offset),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr().add(bv.offset),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr().add(cv.offset),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
