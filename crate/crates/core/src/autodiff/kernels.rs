//! Dense row-major matrix kernels. Every product accumulates into `out`.

use crate::Scalar;

/// `out (m×n) += a (m×k) · b (k×n)`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for (o, ar) in out[..m * n].chunks_exact_mut(n).zip(a[..m * k].chunks_exact(k)) {
        for (&x, br) in ar.iter().zip(b[..k * n].chunks_exact(n)) {
            if x == T::zero() {
                continue;
            }
            for (dst, &y) in o.iter_mut().zip(br) {
                *dst += x * y;
            }
        }
    }
}

/// `out (m×n) += a (m×k) · b (n×k)ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    // row-axpy form over bᵀ vectorizes; a dot-product inner loop does not
    let bt = transpose(&b[..n * k], n, k);
    gemm_nn(a, &bt, m, k, n, out);
}

/// `out (m×n) += a (r×m)ᵀ · b (r×n)`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], r: usize, m: usize, n: usize, out: &mut [T]) {
    for p in 0..r {
        let br = &b[p * n..(p + 1) * n];
        for (i, &x) in a[p * m..(p + 1) * m].iter().enumerate() {
            if x == T::zero() {
                continue;
            }
            for (dst, &y) in out[i * n..(i + 1) * n].iter_mut().zip(br) {
                *dst += x * y;
            }
        }
    }
}

pub(crate) fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
