//! Strided dgemm wrapper.

/// Strided view of a matrix stored in a flat slice.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(cols: usize) -> Self {
        Self { rs: cols, cs: 1 }
    }

    /// Row-major storage read as its transpose.
    pub fn transposed(cols_of_stored: usize) -> Self {
        Self { rs: 1, cs: cols_of_stored }
    }

    pub fn t(self) -> Self {
        Self { rs: self.cs, cs: self.rs }
    }
}

/// `c = alpha * a·b + beta * c` for an `m×k` by `k×n` product.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    av: View,
    b: &[f64],
    bv: View,
    beta: f64,
    c: &mut [f64],
    cv: View,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds are checked here once so the unsafe call below only reads and
    // writes inside the slices.
    if m > 0 && k > 0 {
        let a_last = (m - 1) * av.rs + (k - 1) * av.cs;
        let b_last = (k - 1) * bv.rs + (n - 1) * bv.cs;
        assert!(a_last < a.len() && b_last < b.len(), "gemm operand out of bounds");
    }
    let c_last = (m - 1) * cv.rs + (n - 1) * cv.cs;
    assert!(c_last < c.len(), "gemm output out of bounds");
    // SAFETY: every index touched by the kernel is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            av.rs as isize,
            av.cs as isize,
            b.as_ptr(),
            bv.rs as isize,
            bv.cs as isize,
            beta,
            c.as_mut_ptr(),
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}
