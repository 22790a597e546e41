//! Scaled dot-product attention over packed sequences.
//!
//! Several sequences are stacked row-wise into one matrix; each
//! [`AttentionSegment`] names the query rows and key rows of one of them.

use std::ops::Range;

use super::kernels::{dot, softmax_in_place};
use super::{Result, Scalar, Tensor, TensorError, MASKED_LOGIT};

/// One sequence inside packed query and key matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionSegment {
    pub queries: Range<usize>,
    pub keys: Range<usize>,
    /// Query `i` may only see keys `0..=i` of the segment.
    pub causal: bool,
    /// Per-key flag; `false` keys are hidden from every query.
    pub key_allowed: Option<Vec<bool>>,
}

impl AttentionSegment {
    /// Unmasked self-attention over rows `range`.
    pub fn full(range: Range<usize>) -> Self {
        Self {
            queries: range.clone(),
            keys: range,
            causal: false,
            key_allowed: None,
        }
    }

    pub fn causal(range: Range<usize>) -> Self {
        Self {
            causal: true,
            ..Self::full(range)
        }
    }

    fn allowed(&self, i: usize, j: usize) -> bool {
        (!self.causal || j <= i) && self.key_allowed.as_ref().is_none_or(|a| a[j])
    }

    fn validate(&self, q_rows: usize, k_rows: usize) -> Result<()> {
        let bad = || TensorError::ShapeMismatch {
            op: "attention",
            left: vec![self.queries.start, self.queries.end, q_rows],
            right: vec![self.keys.start, self.keys.end, k_rows],
        };
        if self.queries.end > q_rows || self.keys.end > k_rows || self.keys.is_empty() {
            return Err(bad());
        }
        if let Some(a) = &self.key_allowed {
            if a.len() != self.keys.len() {
                return Err(bad());
            }
        }
        for i in 0..self.queries.len() {
            if !(0..self.keys.len()).any(|j| self.allowed(i, j)) {
                return Err(TensorError::DegenerateMask {
                    query: self.queries.start + i,
                });
            }
        }
        Ok(())
    }
}

pub(crate) struct Forward<T> {
    pub out: Vec<T>,
    pub probs: Vec<T>,
}

/// Shapes checked, returns `(rows_q, d, d_k)`.
fn check<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    segments: &[AttentionSegment],
    heads: usize,
) -> Result<(usize, usize, usize)> {
    let d = q.cols();
    let dims_ok = [q.shape(), k.shape(), v.shape()].iter().all(|s| s.len() == 2)
        && k.cols() == d
        && v.cols() == d
        && k.rows() == v.rows()
        && heads > 0
        && d % heads == 0;
    if !dims_ok {
        return Err(TensorError::ShapeMismatch {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    for s in segments {
        s.validate(q.rows(), k.rows())?;
    }
    Ok((q.rows(), d, d / heads))
}

/// Softmax weights for every segment, head and query, in that nesting
/// order; each row has one entry per segment key.
pub(crate) fn weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    segments: &[AttentionSegment],
    heads: usize,
    d_k: usize,
) -> Vec<T> {
    let scale = T::from_f64_lossy(1.0 / (d_k as f64).sqrt());
    let masked = T::from_f64_lossy(MASKED_LOGIT);
    let mut probs = Vec::new();
    for s in segments {
        for h in 0..heads {
            let cols = h * d_k..(h + 1) * d_k;
            for (i, qi) in s.queries.clone().enumerate() {
                let qrow = &q.row(qi)[cols.clone()];
                let start = probs.len();
                for (j, kj) in s.keys.clone().enumerate() {
                    let mut logit = dot(qrow, &k.row(kj)[cols.clone()]) * scale;
                    if !s.allowed(i, j) {
                        logit = logit + masked;
                    }
                    probs.push(logit);
                }
                softmax_in_place(&mut probs[start..]);
            }
        }
    }
    probs
}

pub(crate) fn forward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    segments: &[AttentionSegment],
    heads: usize,
    drop_mask: Option<&[T]>,
) -> Result<Forward<T>> {
    let (rows, d, d_k) = check(q, k, v, segments, heads)?;
    let probs = weights(q, k, segments, heads, d_k);
    let mut out = vec![T::zero(); rows * d];
    let mut p = 0;
    for s in segments {
        for h in 0..heads {
            let cols = h * d_k..(h + 1) * d_k;
            for qi in s.queries.clone() {
                let orow = &mut out[qi * d + cols.start..qi * d + cols.end];
                for kj in s.keys.clone() {
                    let w = match drop_mask {
                        Some(m) => probs[p] * m[p],
                        None => probs[p],
                    };
                    p += 1;
                    if w == T::zero() {
                        continue;
                    }
                    for (o, &vv) in orow.iter_mut().zip(&v.row(kj)[cols.clone()]) {
                        *o = *o + w * vv;
                    }
                }
            }
        }
    }
    Ok(Forward { out, probs })
}

pub(crate) struct Backward<T> {
    pub dq: Vec<T>,
    pub dk: Vec<T>,
    pub dv: Vec<T>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    segments: &[AttentionSegment],
    heads: usize,
    probs: &[T],
    drop_mask: Option<&[T]>,
    g: &[T],
) -> Backward<T> {
    let d = q.cols();
    let d_k = d / heads;
    let scale = T::from_f64_lossy(1.0 / (d_k as f64).sqrt());
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut p = 0;
    let mut dp = Vec::new();
    for s in segments {
        let n = s.keys.len();
        for h in 0..heads {
            let cols = h * d_k..(h + 1) * d_k;
            for qi in s.queries.clone() {
                let go = &g[qi * d + cols.start..qi * d + cols.end];
                let row = &probs[p..p + n];
                let mask = drop_mask.map(|m| &m[p..p + n]);
                dp.clear();
                for (j, kj) in s.keys.clone().enumerate() {
                    let m = mask.map_or(T::one(), |m| m[j]);
                    let w = row[j] * m;
                    if w != T::zero() {
                        for (dvv, &gv) in dv[kj * d + cols.start..kj * d + cols.end].iter_mut().zip(go) {
                            *dvv = *dvv + w * gv;
                        }
                    }
                    dp.push(dot(go, &v.row(kj)[cols.clone()]) * m);
                }
                let s_dot = dot(row, &dp);
                let qrow = &q.row(qi)[cols.clone()];
                for (j, kj) in s.keys.clone().enumerate() {
                    let ds = row[j] * (dp[j] - s_dot) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &k.row(kj)[cols.clone()];
                    for c in 0..d_k {
                        dq[qi * d + cols.start + c] = dq[qi * d + cols.start + c] + ds * krow[c];
                        dk[kj * d + cols.start + c] = dk[kj * d + cols.start + c] + ds * qrow[c];
                    }
                }
                p += n;
            }
        }
    }
    Backward { dq, dk, dv }
}

/// Attention weights without recording anything; one `[queries, keys]`
/// tensor per segment and head.
pub fn attention_weights<T: Scalar>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    segments: &[AttentionSegment],
    heads: usize,
) -> Result<Vec<Tensor<T>>> {
    let (_, _, d_k) = check(q, k, k, segments, heads)?;
    let flat = weights(q, k, segments, heads, d_k);
    let mut out = Vec::new();
    let mut p = 0;
    for s in segments {
        let size = s.queries.len() * s.keys.len();
        for _ in 0..heads {
            out.push(Tensor::from_parts(
                vec![s.queries.len(), s.keys.len()],
                flat[p..p + size].to_vec(),
            ));
            p += size;
        }
    }
    Ok(out)
}
