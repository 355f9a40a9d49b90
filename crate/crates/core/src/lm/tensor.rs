//! Scalar abstraction and the dense kernels the model is built from.
//!
//! Matrices are row-major slices addressed with explicit `(row, col)`
//! strides, which lets attention heads and transposes be expressed as views
//! without copying.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, DivAssign, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Debug
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    const NEG_INFINITY: Self;

    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    fn is_finite(self) -> bool;

    /// `c = alpha * a @ b + beta * c` on strided views.
    ///
    /// # Safety
    /// Every index reachable through the shapes and strides must be in
    /// bounds of the respective slice; [`gemm`] checks this.
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

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;
            const NEG_INFINITY: Self = <$t>::NEG_INFINITY;

            #[inline]
            fn from_f64(x: f64) -> Self {
                x as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn tanh(self) -> Self {
                <$t>::tanh(self)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
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
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> View<'a, T> {
    /// Dense row-major `rows x cols` matrix.
    pub fn dense(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self::strided(data, rows, cols, cols, 1)
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, rs: usize, cs: usize) -> Self {
        View {
            data,
            rows,
            cols,
            rs,
            cs,
        }
    }

    pub fn t(self) -> Self {
        View {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn check(&self, what: &str) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.rs + (self.cols - 1) * self.cs;
            assert!(last < self.data.len(), "{what} view out of bounds");
        }
    }
}

/// `c = alpha * a @ b + beta * c`, with `c` a strided `a.rows x b.cols`
/// matrix starting at the front of `c`.
pub fn gemm<T: Real>(
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    rsc: usize,
    csc: usize,
) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    a.check("lhs");
    b.check("rhs");
    let last = (m - 1) * rsc + (n - 1) * csc;
    assert!(last < c.len(), "output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    // SAFETY: all three views were bounds-checked above and `c` is a unique
    // borrow, so it cannot alias `a` or `b`.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        )
    }
}

pub const LN_EPS: f64 = 1e-5;

/// Row-wise layer norm over `[rows, d]`; records mean and reciprocal std.
pub fn layernorm_forward<T: Real>(
    out: &mut [T],
    mean: &mut [T],
    rstd: &mut [T],
    inp: &[T],
    gain: &[T],
    bias: &[T],
    d: usize,
) {
    let eps = T::from_f64(LN_EPS);
    let dn = T::from_f64(d as f64);
    for (r, (row, o)) in inp.chunks_exact(d).zip(out.chunks_exact_mut(d)).enumerate() {
        let m = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&x| (x - m) * (x - m)).sum::<T>() / dn;
        let s = T::ONE / (var + eps).sqrt();
        for i in 0..d {
            o[i] = (row[i] - m) * s * gain[i] + bias[i];
        }
        mean[r] = m;
        rstd[r] = s;
    }
}

/// Accumulates into `dinp`, `dgain` and `dbias`.
#[allow(clippy::too_many_arguments)]
pub fn layernorm_backward<T: Real>(
    dinp: &mut [T],
    dgain: &mut [T],
    dbias: &mut [T],
    dout: &[T],
    inp: &[T],
    gain: &[T],
    mean: &[T],
    rstd: &[T],
    d: usize,
) {
    let dn = T::from_f64(d as f64);
    for r in 0..mean.len() {
        let row = &inp[r * d..(r + 1) * d];
        let drow = &dout[r * d..(r + 1) * d];
        let (m, s) = (mean[r], rstd[r]);
        let mut mean_dxhat = T::ZERO;
        let mut mean_dxhat_xhat = T::ZERO;
        for i in 0..d {
            let xhat = (row[i] - m) * s;
            let dxhat = drow[i] * gain[i];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
        }
        mean_dxhat /= dn;
        mean_dxhat_xhat /= dn;
        let di = &mut dinp[r * d..(r + 1) * d];
        for i in 0..d {
            let xhat = (row[i] - m) * s;
            let dxhat = drow[i] * gain[i];
            dgain[i] += drow[i] * xhat;
            dbias[i] += drow[i];
            di[i] += s * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
        }
    }
}

const GELU_A: f64 = 0.044715;
// sqrt(2 / pi)
const GELU_S: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let s = T::from_f64(GELU_S);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::ONE + (s * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let s = T::from_f64(GELU_S);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let th = (s * (x + a * x * x * x)).tanh();
    half * (T::ONE + th) + half * x * (T::ONE - th * th) * s * (T::ONE + three * a * x * x)
}

/// In-place softmax of one row; returns the log normalizer.
pub fn softmax_in_place<T: Real>(row: &mut [T]) -> T {
    let mut max = T::NEG_INFINITY;
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    max + sum.ln()
}

/// Log-softmax in 64-bit regardless of the storage type.
pub fn log_softmax_f64<T: Real>(row: &[T]) -> Vec<f64> {
    let max = row
        .iter()
        .map(|v| v.to_f64())
        .fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v.to_f64() - lse).collect()
}
