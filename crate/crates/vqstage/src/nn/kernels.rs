//! Raw numeric kernels shared by forward and backward passes.
//!
//! The matmul uses the i-k-j loop order so the innermost loop is a pure
//! elementwise multiply-accumulate over contiguous rows, which the compiler
//! vectorizes without needing a float-reassociation license.

use super::scalar::Scalar;

/// out[m,n] += a[m,k] @ b[k,n]
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// out[n,m] = transpose of a[m,n]
pub fn transpose<T: Scalar>(a: &[T], m: usize, n: usize, out: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
}

/// Numerically stable softmax over a contiguous row, written in place.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// log(sum(exp(row))) with the usual max shift.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let mut max = row[0];
    for &v in row.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in row.iter() {
        sum += (v - max).exp();
    }
    max + sum.ln()
}
