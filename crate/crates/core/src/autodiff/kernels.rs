//! Forward and adjoint kernels for the catalog operations.
//!
//! All kernels work on flat row-major buffers. Shape checks happen in
//! `infer_shape`; kernels assume conforming inputs.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::numel;

/// How the right operand of `add` / `elementwise_mul` maps onto the left.
#[derive(Debug, Clone)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand equals the trailing dims of the left: index modulo len.
    Suffix(usize),
    /// Per-axis strides into the right operand (0 on broadcast axes).
    General(Vec<usize>),
}

pub(crate) fn broadcast_rule(a: &[usize], b: &[usize]) -> Result<Broadcast> {
    if a == b {
        return Ok(Broadcast::Same);
    }
    if b.len() > a.len() {
        return Err(Error::Shape(format!("cannot broadcast {b:?} onto {a:?}")));
    }
    let lead = a.len() - b.len();
    if a[lead..] == *b {
        return Ok(Broadcast::Suffix(numel(b)));
    }
    let mut strides = vec![0usize; a.len()];
    let mut stride = 1;
    for (k, &bd) in b.iter().enumerate().rev() {
        let ad = a[lead + k];
        if bd == ad {
            strides[lead + k] = stride;
        } else if bd != 1 {
            return Err(Error::Shape(format!("cannot broadcast {b:?} onto {a:?}")));
        }
        stride *= bd;
    }
    Ok(Broadcast::General(strides))
}

/// Calls `f(a_index, b_index)` for every element of the left operand.
pub(crate) fn for_each_pair(a_shape: &[usize], rule: &Broadcast, mut f: impl FnMut(usize, usize)) {
    let total = numel(a_shape);
    match rule {
        Broadcast::Same => (0..total).for_each(|i| f(i, i)),
        Broadcast::Suffix(len) => (0..total).for_each(|i| f(i, i % len)),
        Broadcast::General(strides) => {
            let mut counter = vec![0usize; a_shape.len()];
            let mut b_off = 0usize;
            for i in 0..total {
                f(i, b_off);
                for ax in (0..a_shape.len()).rev() {
                    counter[ax] += 1;
                    b_off += strides[ax];
                    if counter[ax] < a_shape[ax] {
                        break;
                    }
                    b_off -= strides[ax] * a_shape[ax];
                    counter[ax] = 0;
                }
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}

/// `ga[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_grad_lhs(g: &[f64], b: &[f64], ga: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            ga[i * k + p] += acc;
        }
    }
}

/// `gb[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_grad_rhs(a: &[f64], g: &[f64], gb: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let gb_row = &mut gb[p * n..(p + 1) * n];
            for (gbv, gv) in gb_row.iter_mut().zip(g_row) {
                *gbv += aip * gv;
            }
        }
    }
}

/// Splits a shape at `axis` into (outer, extent, inner) element counts.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row, written into `out`.
pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = libm::exp(v - max);
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `-log softmax(row)[target]`
pub(crate) fn neg_log_softmax(row: &[f64], target: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
    lse - row[target]
}
