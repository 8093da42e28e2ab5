//! Shape helpers and kernels shared by forward and backward passes.

use super::numel;
use crate::error::{Error, Result};

/// Output shape of an elementwise op.
///
/// Operands must have equal shapes, or one must hold a single element, or
/// the shorter shape must be a suffix of the longer one (broadcast over
/// leading dimensions). In every accepted case the smaller operand is read
/// at `i % len`.
pub(super) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (na, nb) = (numel(a), numel(b));
    if a == b {
        return Ok(a.to_vec());
    }
    if nb == 1 && a.len() >= b.len() {
        return Ok(a.to_vec());
    }
    if na == 1 && b.len() >= a.len() {
        return Ok(b.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    })
}

pub(super) fn binary(a: &[f64], b: &[f64], n: usize, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    if a.len() == n && b.len() == n {
        a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
    } else {
        // the shorter operand repeats whole, so walk it in chunks
        let mut out = Vec::with_capacity(n);
        if b.len() < n {
            for chunk in a.chunks(b.len().max(1)) {
                out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
            }
        } else {
            for chunk in b.chunks(a.len().max(1)) {
                out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
            }
        }
        out
    }
}

/// Sum `src` (full length) into `dst`, folding broadcast positions.
pub(super) fn accumulate(dst: &mut [f64], src: impl Iterator<Item = f64>) {
    let l = dst.len();
    let mut j = 0;
    for v in src {
        dst[j] += v;
        j += 1;
        if j == l {
            j = 0;
        }
    }
}

pub(super) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

pub(super) fn check_perm(perm: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if perm.len() != rank {
        return Err(Error::contract(format!("permutation {perm:?} for rank {rank}")));
    }
    for &p in perm {
        if p >= rank || seen[p] {
            return Err(Error::contract(format!("permutation {perm:?} for rank {rank}")));
        }
        seen[p] = true;
    }
    Ok(())
}

pub(super) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let n = data.len();
    if rank == 0 || n == 0 {
        return (data.to_vec(), out_shape);
    }
    let in_strides = strides(shape);
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(n);
    let inner = out_shape[rank - 1];
    let inner_stride = src[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    while out.len() < n {
        let mut off = base;
        for _ in 0..inner {
            out.push(data[off]);
            off += inner_stride;
        }
        // advance the outer counters (all but the last axis)
        let mut d = rank - 1;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

pub(super) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (d, &p) in perm.iter().enumerate() {
        inv[p] = d;
    }
    inv
}

/// Numerically stable logistic function, saturating strictly inside (0, 1).
pub(super) fn sigmoid(x: f64) -> f64 {
    let s = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

pub(super) fn softmax_rows(x: &[f64], cols: usize) -> Result<Vec<f64>> {
    let mut out = vec![0.0; x.len()];
    if cols == 0 {
        return Ok(out);
    }
    for (r, (row, dst)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let max = row
            .iter()
            .copied()
            .filter(|v| *v != f64::NEG_INFINITY)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::DegenerateRow { row: r });
        }
        let mut sum = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            sum += *d;
        }
        let inv = 1.0 / sum;
        dst.iter_mut().for_each(|d| *d *= inv);
    }
    Ok(out)
}

pub(super) struct LayerNormOut {
    pub y: Vec<f64>,
    pub normalized: Vec<f64>,
    pub rstd: Vec<f64>,
}

pub(super) fn layer_norm(x: &[f64], gain: &[f64], bias: &[f64], eps: f64) -> LayerNormOut {
    let d = gain.len();
    let rows = if d == 0 { 0 } else { x.len() / d };
    let mut y = vec![0.0; x.len()];
    let mut normalized = vec![0.0; x.len()];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (row[j] - mean) * rs;
            normalized[r * d + j] = h;
            y[r * d + j] = h * gain[j] + bias[j];
        }
    }
    LayerNormOut { y, normalized, rstd }
}
