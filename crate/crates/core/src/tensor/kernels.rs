//! Inner loops shared by forward and backward passes.
//!
//! Work is split by output rows only, and each output element is accumulated
//! in a fixed order, so the parallel and sequential paths agree bit for bit
//! and a row's result never depends on how many other rows are in the batch.

use super::Scalar;
use crate::parallel::for_each_chunk_mut;

/// Rows handed to one task; keeps per-task overhead small for thin matrices.
fn rows_per_task(n_cols: usize) -> usize {
    (4096 / n_cols.max(1)).clamp(1, 64)
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    if n == 0 {
        return out;
    }
    let rows = rows_per_task(n);
    for_each_chunk_mut(&mut out, rows * n, |chunk_idx, chunk| {
        let first = chunk_idx * rows;
        for (r, out_row) in chunk.chunks_mut(n).enumerate() {
            let a_row = &a[(first + r) * k..(first + r + 1) * k];
            for (p, &s) in a_row.iter().enumerate() {
                let b_row = &b[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o = *o + s * bv;
                }
            }
        }
    });
    out
}

/// `out[m×k] = a[m×n] · b[k×n]ᵀ`
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    if k == 0 {
        return out;
    }
    let rows = rows_per_task(k);
    for_each_chunk_mut(&mut out, rows * k, |chunk_idx, chunk| {
        let first = chunk_idx * rows;
        for (r, out_row) in chunk.chunks_mut(k).enumerate() {
            let a_row = &a[(first + r) * n..(first + r + 1) * n];
            for (j, o) in out_row.iter_mut().enumerate() {
                let b_row = &b[j * n..(j + 1) * n];
                let mut s = T::zero();
                for (&x, &y) in a_row.iter().zip(b_row) {
                    s = s + x * y;
                }
                *o = s;
            }
        }
    });
    out
}

/// `out[k×n] = a[r×k]ᵀ · c[r×n]`
pub fn matmul_at<T: Scalar>(a: &[T], c: &[T], r: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    if n == 0 {
        return out;
    }
    let rows = rows_per_task(n);
    for_each_chunk_mut(&mut out, rows * n, |chunk_idx, chunk| {
        let first = chunk_idx * rows;
        for (ri, out_row) in chunk.chunks_mut(n).enumerate() {
            let i = first + ri;
            for row in 0..r {
                let s = a[row * k + i];
                let c_row = &c[row * n..(row + 1) * n];
                for (o, &cv) in out_row.iter_mut().zip(c_row) {
                    *o = *o + s * cv;
                }
            }
        }
    });
    out
}

/// Softmax over the middle extent of an `[outer, len, inner]` view.
pub fn softmax<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    let block = len * inner;
    if block == 0 {
        return out;
    }
    for_each_chunk_mut(&mut out, block, |o, dst| {
        let src = &x[o * block..(o + 1) * block];
        for i in 0..inner {
            let mut max = T::neg_infinity();
            for l in 0..len {
                max = max.max(src[l * inner + i]);
            }
            let mut total = T::zero();
            for l in 0..len {
                let e = (src[l * inner + i] - max).exp();
                dst[l * inner + i] = e;
                total = total + e;
            }
            for l in 0..len {
                dst[l * inner + i] = dst[l * inner + i] / total;
            }
        }
    });
    debug_assert_eq!(out.len(), outer * block);
    out
}

/// Guarded cosine similarity. Returns `(cos, |a|, |b|)`; the cosine is zero
/// when either norm is below `eps`.
pub fn cosine<T: Scalar>(a: &[T], b: &[T], eps: T) -> (T, T, T) {
    let mut dot = T::zero();
    let mut na = T::zero();
    let mut nb = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        dot = dot + x * y;
        na = na + x * x;
        nb = nb + y * y;
    }
    let (na, nb) = (na.sqrt(), nb.sqrt());
    if na < eps || nb < eps {
        (T::zero(), na, nb)
    } else {
        (dot / (na * nb), na, nb)
    }
}

/// `sqrt(2/π)`, used by the tanh approximation of GELU.
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::lit(GELU_C);
    let a = T::lit(GELU_A);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}
