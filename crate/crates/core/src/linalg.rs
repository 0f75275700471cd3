//! Dense kernels shared by the model and tokenizer.
//!
//! Matrices are row-major slices with explicit row strides. Large products go
//! through `matrixmultiply`; one- and two-row products (the token-by-token
//! decode path) use direct dot/axpy loops, which avoid packing the right-hand
//! operand on every call.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float as NumFloat, FromPrimitive, ToPrimitive};

pub trait Float:
    NumFloat
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary element strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m x k`, `k x n`, `m x n` views.
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
        Self::from_f64(v).expect("representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("representable")
    }
}

impl Float for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Float for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// A read-only matrix view: `rows x cols` with row stride `ld`, optionally
/// read transposed.
#[derive(Clone, Copy)]
pub struct View<'a, T> {
    pub data: &'a [T],
    pub ld: usize,
    pub trans: bool,
}

impl<'a, T> View<'a, T> {
    pub fn new(data: &'a [T], ld: usize) -> Self {
        Self { data, ld, trans: false }
    }

    pub fn t(data: &'a [T], ld: usize) -> Self {
        Self { data, ld, trans: true }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            (1, self.ld as isize)
        } else {
            (self.ld as isize, 1)
        }
    }

    // last element touched by a logical `rows x cols` view
    fn extent(&self, rows: usize, cols: usize) -> usize {
        if rows == 0 || cols == 0 {
            return 0;
        }
        let (r, c) = if self.trans { (cols, rows) } else { (rows, cols) };
        (r - 1) * self.ld + c
    }
}

/// `c[m x n] (ldc) = alpha * a[m x k] * b[k x n] + beta * c`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.data.len() >= a.extent(m, k), "lhs view out of bounds");
    assert!(b.data.len() >= b.extent(k, n), "rhs view out of bounds");
    assert!(c.len() >= (m - 1) * ldc + n, "output view out of bounds");
    if m <= 2 {
        small_m(m, k, n, alpha, a, b, beta, c, ldc);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: bounds checked above for every strided view.
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
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[allow(clippy::too_many_arguments)]
fn small_m<T: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: View<'_, T>,
    b: View<'_, T>,
    beta: T,
    c: &mut [T],
    ldc: usize,
) {
    let a_at = |i: usize, p: usize| {
        if a.trans {
            a.data[p * a.ld + i]
        } else {
            a.data[i * a.ld + p]
        }
    };
    for i in 0..m {
        let row = &mut c[i * ldc..i * ldc + n];
        if beta == T::zero() {
            row.fill(T::zero());
        } else if beta != T::one() {
            row.iter_mut().for_each(|x| *x *= beta);
        }
        if b.trans {
            // b stored n x k: each output is a contiguous dot product
            for (j, out) in row.iter_mut().enumerate() {
                let bj = &b.data[j * b.ld..j * b.ld + k];
                let mut acc = T::zero();
                if a.trans {
                    for (p, &bv) in bj.iter().enumerate() {
                        acc += a_at(i, p) * bv;
                    }
                } else {
                    acc = dot(&a.data[i * a.ld..i * a.ld + k], bj);
                }
                *out += alpha * acc;
            }
        } else {
            for p in 0..k {
                let s = alpha * a_at(i, p);
                if s == T::zero() {
                    continue;
                }
                axpy(s, &b.data[p * b.ld..p * b.ld + n], row);
            }
        }
    }
}

#[inline]
pub fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    // four accumulators let the compiler vectorize without reassociation flags
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        for l in 0..4 {
            acc[l] += a[4 * i + l] * b[4 * i + l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub fn axpy<T: Float>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c (m x n) = a (m x k) * b (k x n)`, all contiguous.
pub fn matmul<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm(m, k, n, T::one(), View::new(a, k), View::new(b, n), T::zero(), c, n);
}

/// `c += a^T * b` where `a` is `k x m` and `b` is `k x n`.
pub fn matmul_tn_acc<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm(m, k, n, T::one(), View::t(a, m), View::new(b, n), T::one(), c, n);
}

/// `c (= or +=) a * b^T` where `a` is `m x k` and `b` is `n x k`.
pub fn matmul_nt<T: Float>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize, accumulate: bool) {
    let beta = if accumulate { T::one() } else { T::zero() };
    gemm(m, k, n, T::one(), View::new(a, k), View::t(b, k), beta, c, n);
}

pub fn add_bias<T: Float>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Column sums of `x` (rows of width `out.len()`) added into `out`.
pub fn sum_rows_into<T: Float>(x: &[T], out: &mut [T]) {
    for row in x.chunks(out.len()) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn all_transpose_combinations_match_naive() {
        for &(m, k, n) in &[(1, 5, 3), (2, 4, 6), (7, 3, 5), (16, 9, 11)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            let want = naive(&a, &b, m, k, n);
            let (at, bt) = (transpose(&a, m, k), transpose(&b, k, n));
            for (av, bv) in [
                (View::new(&a[..], k), View::new(&b[..], n)),
                (View::t(&at[..], m), View::new(&b[..], n)),
                (View::new(&a[..], k), View::t(&bt[..], k)),
                (View::t(&at[..], m), View::t(&bt[..], k)),
            ] {
                let mut c = vec![1.0; m * n];
                gemm(m, k, n, 1.0, av, bv, 0.0, &mut c, n);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = [10.0f32];
        gemm(1, 2, 1, 1.0, View::new(&a, 2), View::new(&b, 1), 1.0, &mut c, 1);
        assert_eq!(c[0], 21.0);
    }
}
