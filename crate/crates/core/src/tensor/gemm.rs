//! Thin safe wrappers over `matrixmultiply::dgemm` for the three layouts
//! the backward passes need.

/// `c[m,n] (+)= a[m,k] · b[k,n]`, all row-major.
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// `c[m,k] (+)= a[m,n] · b[k,n]ᵀ`.
pub(crate) fn gemm_nt(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    assert!(a.len() >= m * n && b.len() >= k * n && c.len() >= m * k);
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: as above; b is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            m, n, k, 1.0,
            a.as_ptr(), n as isize, 1,
            b.as_ptr(), 1, n as isize,
            beta, c.as_mut_ptr(), k as isize, 1,
        );
    }
}

/// `c[k,n] (+)= a[m,k]ᵀ · b[m,n]`.
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], acc: bool) {
    assert!(a.len() >= m * k && b.len() >= m * n && c.len() >= k * n);
    let beta = if acc { 1.0 } else { 0.0 };
    // SAFETY: as above; a is read through transposed strides.
    unsafe {
        matrixmultiply::dgemm(
            k, m, n, 1.0,
            a.as_ptr(), 1, k as isize,
            b.as_ptr(), n as isize, 1,
            beta, c.as_mut_ptr(), n as isize, 1,
        );
    }
}
