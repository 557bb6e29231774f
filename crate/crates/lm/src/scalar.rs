//! Floating-point element types and a bounds-checked strided GEMM.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub trait Scalar: Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static {
    /// `C <- alpha * A B + beta * C` over raw strided storage.
    ///
    /// # Safety
    /// Every index reachable through the given dimensions and strides must
    /// lie inside the allocations behind `a`, `b` and `c`.
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

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

impl Scalar for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Scalar for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// A strided read-only matrix view.
#[derive(Clone, Copy)]
pub(crate) struct View<'a, S> {
    pub data: &'a [S],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, S> View<'a, S> {
    pub fn row_major(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self { data, rows, cols, rs: cols, cs: 1 }
    }

    /// The transpose of a row-major `rows x cols` buffer.
    pub fn transposed(data: &'a [S], rows: usize, cols: usize) -> Self {
        Self { data, rows: cols, cols: rows, rs: 1, cs: cols }
    }
}

fn reach(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs + 1
    }
}

/// `C <- alpha * A B + beta * C`, with `C` given as storage plus strides.
pub(crate) fn gemm<S: Scalar>(alpha: S, a: View<'_, S>, b: View<'_, S>, beta: S, c: &mut [S], rsc: usize, csc: usize) {
    assert_eq!(a.cols, b.rows, "inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(reach(m, k, a.rs, a.cs) <= a.data.len(), "A out of bounds");
    assert!(reach(k, n, b.rs, b.cs) <= b.data.len(), "B out of bounds");
    assert!(reach(m, n, rsc, csc) <= c.len(), "C out of bounds");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                let x = &mut c[i * rsc + j * csc];
                *x = if beta == S::zero() { S::zero() } else { beta * *x };
            }
        }
        return;
    }
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        S::gemm_raw(
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

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|x| (x as f64) * 0.5 - 1.0).collect(); // 3x4
        let mut c = vec![1.0; 8];
        gemm(2.0, View::row_major(&a, 2, 3), View::row_major(&b, 3, 4), 1.0, &mut c, 4, 1);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = 1.0 + 2.0 * (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum::<f64>();
                assert_eq!(c[i * 4 + j], want);
            }
        }
        // A^T B with A stored 3x2.
        let mut d = vec![0.0; 4];
        gemm(1.0, View::transposed(&a, 3, 2), View::row_major(&a, 3, 2), 0.0, &mut d, 2, 1);
        assert_eq!(d, vec![20.0, 26.0, 26.0, 35.0]);
    }

    proptest::proptest! {
        #[test]
        fn gemm_any_layout_matches_naive(
            m in 1usize..7, k in 1usize..7, n in 1usize..7,
            ta: bool, tb: bool, seed in 0u64..1000, beta in -1.0f64..1.0,
        ) {
            let val = |i: usize| ((i as u64 * 2654435761 + seed) % 17) as f64 - 8.0;
            let a: Vec<f64> = (0..m * k).map(val).collect();
            let b: Vec<f64> = (0..k * n).map(|i| val(i + 100)).collect();
            let av = if ta { View::transposed(&a, k, m) } else { View::row_major(&a, m, k) };
            let bv = if tb { View::transposed(&b, n, k) } else { View::row_major(&b, k, n) };
            let at = |i: usize, p: usize| if ta { a[p * m + i] } else { a[i * k + p] };
            let bt = |p: usize, j: usize| if tb { b[j * k + p] } else { b[p * n + j] };
            let mut c: Vec<f64> = (0..m * n).map(|i| val(i + 7)).collect();
            let c0 = c.clone();
            gemm(0.5, av, bv, beta, &mut c, n, 1);
            for i in 0..m {
                for j in 0..n {
                    let want = beta * c0[i * n + j] + 0.5 * (0..k).map(|p| at(i, p) * bt(p, j)).sum::<f64>();
                    proptest::prop_assert!((c[i * n + j] - want).abs() < 1e-9);
                }
            }
        }
    }
}
