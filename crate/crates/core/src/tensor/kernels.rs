//! Raw row-major kernels over slices.
//!
//! Every output row is produced by one closure invocation with a fixed
//! accumulation order, so parallel and sequential builds agree bit for bit.

use super::Scalar;
use crate::par;

/// `out[m,n] = a[m,k] · b[k,n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    par::for_each_row_mut(&mut out, n, m * k * n, |i, row| {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row)
    });
    out
}

/// Single-threaded `matmul`, kept for benchmarking against the parallel path.
pub fn matmul_sequential<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    for (i, row) in out.chunks_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, row);
    }
    out
}

#[inline]
fn matmul_row<T: Scalar>(a_row: &[T], b: &[T], n: usize, out: &mut [T]) {
    for (p, &av) in a_row.iter().enumerate() {
        if av == T::zero() {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out.iter_mut().zip(b_row) {
            *o = *o + av * bv;
        }
    }
}

/// `out[m,n] = a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    par::for_each_row_mut(&mut out, n, m * k * n, |i, row| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in row.iter_mut().enumerate() {
            *o = dot(a_row, &b[j * k..(j + 1) * k]);
        }
    });
    out
}

/// `out[m,n] = a[k,m]ᵀ · b[k,n]`.
pub fn matmul_tn<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    par::for_each_row_mut(&mut out, n, m * k * n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o = *o + av * bv;
            }
        }
    });
    out
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Numerically stable softmax over each `cols`-wide row.
pub fn softmax_rows<T: Scalar>(x: &[T], cols: usize) -> Vec<T> {
    let mut out = x.to_vec();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    out
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// `log(sum(exp(row)))` with max subtraction.
pub fn log_sum_exp<T: Scalar>(row: &[T]) -> T {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Per-row mean and reciprocal standard deviation.
pub fn row_moments<T: Scalar>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).unwrap_or_else(T::one);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row
        .iter()
        .map(|&v| (v - mean) * (v - mean))
        .sum::<T>()
        / n;
    (mean, T::one() / (var + eps).sqrt())
}
