//! Blockwise scaled dot-product cross-attention.
//!
//! Every function works on a stack of per-block matrices `(blocks, 1, rows, cols)`
//! and treats each block independently. Two row activations are provided:
//! the usual softmax and HTN, a clamp to `[0, 1]` followed by row
//! normalization.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Result, XabaError};
use crate::scalar::{lane_dot, lane_max, lane_sum, lit, MatRef, Scalar};
use crate::tensor::{matmul, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum Activation {
    #[default]
    Softmax,
    /// Hard-thresholded ReLU (clamp to `[0, 1]`) with row normalization.
    Htn,
}

impl Activation {
    /// Suffix used in model names, e.g. `XABA20Soft`.
    pub fn tag(&self) -> &'static str {
        match self {
            Activation::Softmax => "Soft",
            Activation::Htn => "HTN",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Softmax => "soft",
            Activation::Htn => "htn",
        })
    }
}

impl FromStr for Activation {
    type Err = XabaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "soft" | "softmax" => Ok(Activation::Softmax),
            "htn" | "ht+n" => Ok(Activation::Htn),
            other => Err(XabaError::config(format!(
                "unknown activation '{other}' (expected soft or htn)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionConfig {
    pub activation: Activation,
    pub d_k: usize,
    pub sparsity_threshold: f64,
}

impl AttentionConfig {
    pub fn new(activation: Activation, d_k: usize) -> Self {
        AttentionConfig {
            activation,
            d_k,
            sparsity_threshold: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_k == 0 {
            return Err(XabaError::config("d_k must be at least 1"));
        }
        check_tau(self.sparsity_threshold)
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if !(0.0..1.0).contains(&tau) {
        return Err(XabaError::precondition(format!(
            "sparsity threshold must lie in [0, 1), got {tau}"
        )));
    }
    Ok(())
}

/// Row-stochastic attention weights for every block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMatrix<T> {
    pub values: Tensor<T>,
    /// Rows whose entries all vanished and were replaced by a one-hot row.
    pub fallback_rows: usize,
}

impl<T: Scalar> AttentionMatrix<T> {
    /// Wraps an externally built stack of row-stochastic matrices.
    pub fn from_values(values: Tensor<T>) -> Result<Self> {
        if values.shape().channels != 1 {
            return Err(XabaError::config(format!(
                "attention must be a matrix stack, got {}",
                values.shape()
            )));
        }
        Ok(AttentionMatrix {
            values,
            fallback_rows: 0,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.values.shape().batch
    }

    pub fn rows(&self) -> usize {
        self.values.shape().height
    }

    pub fn cols(&self) -> usize {
        self.values.shape().width
    }

    /// Row-major `(rows, cols)` slice of one block.
    pub fn block(&self, index: usize) -> &[T] {
        let len = self.rows() * self.cols();
        &self.values.data()[index * len..(index + 1) * len]
    }
}

/// `S = Q·Kᵀ / √d_k` per block. `q` is `(n, 1, m, d)`, `k` is `(n, 1, p, d)`.
///
/// Each score is one product chain over the feature axis, identical for
/// `(i, j)` and the swapped problem's `(j, i)`, so swapping `q` and `k` yields
/// the exact transpose.
pub fn scaled_scores<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, d_k: usize) -> Result<Tensor<T>> {
    let (sq, sk) = (q.shape(), k.shape());
    if sq.channels != 1 || sk.channels != 1 || sq.batch != sk.batch {
        return Err(XabaError::config(format!(
            "scaled_scores: incompatible stacks {sq} and {sk}"
        )));
    }
    if sq.width != sk.width || sq.width != d_k {
        return Err(XabaError::config(format!(
            "scaled_scores: feature widths {} and {} must both equal d_k = {d_k}",
            sq.width, sk.width
        )));
    }
    let (m, p, d) = (sq.height, sk.height, d_k);
    let root = lit::<T>((d as f64).sqrt());
    let mut out = Tensor::zeros(Shape::new(sq.batch, 1, m, p));
    if m * p == 0 {
        return Ok(out);
    }
    out.data_mut()
        .par_chunks_mut(m * p)
        .enumerate()
        .for_each(|(blk, dst)| {
            let qb = MatRef::row_major(&q.data()[blk * m * d..(blk + 1) * m * d], m, d);
            let kb = MatRef::row_major(&k.data()[blk * p * d..(blk + 1) * p * d], p, d);
            T::gemm(qb, kb.t(), dst, false);
            dst.iter_mut().for_each(|v| *v /= root);
        });
    Ok(out)
}

fn row_len<T: Scalar>(s: &Tensor<T>) -> usize {
    s.shape().width
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: Scalar>(scores: &Tensor<T>) -> AttentionMatrix<T> {
    softmax_rows_owned(scores.clone())
}

fn softmax_rows_owned<T: Scalar>(mut out: Tensor<T>) -> AttentionMatrix<T> {
    let n = row_len(&out);
    if n > 0 {
        out.data_mut().par_chunks_mut(n).for_each(softmax_in_place);
    }
    AttentionMatrix {
        values: out,
        fallback_rows: 0,
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = lane_max(row);
    row.iter_mut().for_each(|v| *v = (*v - max).exp());
    let inv = T::one() / lane_sum(row);
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Index of the largest entry, lowest index on ties.
fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[inline]
fn clamp_unit<T: Scalar>(v: T) -> T {
    if v > T::one() {
        T::one()
    } else if v > T::zero() {
        v
    } else {
        T::zero()
    }
}

fn one_hot<T: Scalar>(row: &mut [T], at: usize) {
    row.iter_mut().for_each(|v| *v = T::zero());
    row[at] = T::one();
}

/// HTN activation: clamp to `[0, 1]`, then divide each row by its sum.
///
/// A row whose clamped entries are all zero becomes the one-hot row at the
/// argmax of its raw scores; such rows are counted in `fallback_rows`.
pub fn htn_rows<T: Scalar>(scores: &Tensor<T>) -> AttentionMatrix<T> {
    htn_rows_owned(scores.clone())
}

fn htn_rows_owned<T: Scalar>(mut out: Tensor<T>) -> AttentionMatrix<T> {
    let n = row_len(&out);
    if n == 0 {
        return AttentionMatrix {
            values: out,
            fallback_rows: 0,
        };
    }
    let fallback_rows = out
        .data_mut()
        .par_chunks_mut(n)
        .map(|row| {
            // The clamped row sums to zero exactly when no raw score is positive.
            if lane_max(row) > T::zero() {
                row.iter_mut().for_each(|v| *v = clamp_unit(*v));
                let sum = lane_sum(row);
                row.iter_mut().for_each(|v| *v /= sum);
                0
            } else {
                let pick = argmax(row);
                one_hot(row, pick);
                1
            }
        })
        .sum();
    AttentionMatrix {
        values: out,
        fallback_rows,
    }
}

pub fn activate<T: Scalar>(activation: Activation, scores: &Tensor<T>) -> AttentionMatrix<T> {
    match activation {
        Activation::Softmax => softmax_rows(scores),
        Activation::Htn => htn_rows(scores),
    }
}

/// [`activate`] reusing the score buffer.
pub fn activate_owned<T: Scalar>(activation: Activation, scores: Tensor<T>) -> AttentionMatrix<T> {
    match activation {
        Activation::Softmax => softmax_rows_owned(scores),
        Activation::Htn => htn_rows_owned(scores),
    }
}

/// Zeroes entries below `tau` and renormalizes the surviving row mass.
/// Rows left empty fall back to a one-hot row at their largest entry.
pub fn sparsify<T: Scalar>(a: &AttentionMatrix<T>, tau: f64) -> Result<AttentionMatrix<T>> {
    check_tau(tau)?;
    if tau == 0.0 {
        return Ok(a.clone());
    }
    let threshold = lit::<T>(tau);
    let mut values = a.values.clone();
    let n = a.cols();
    if n == 0 {
        return Ok(a.clone());
    }
    let extra: usize = values
        .data_mut()
        .par_chunks_mut(n)
        .map(|row| {
            let pick = argmax(row);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                if *v < threshold {
                    *v = T::zero();
                }
                sum += *v;
            }
            if sum > T::zero() {
                row.iter_mut().for_each(|v| *v /= sum);
                0
            } else {
                one_hot(row, pick);
                1
            }
        })
        .sum();
    Ok(AttentionMatrix {
        values,
        fallback_rows: a.fallback_rows + extra,
    })
}

/// `A·V` per block: every output row is a convex combination of rows of `V`.
pub fn apply_attention<T: Scalar>(a: &AttentionMatrix<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sv) = (a.values.shape(), v.shape());
    if sa.width != sv.height || sa.batch != sv.batch {
        return Err(XabaError::config(format!(
            "apply_attention: attention {sa} cannot weight values {sv}"
        )));
    }
    matmul(&a.values, v)
}

/// Fraction of entries `≤ tau`.
pub fn sparsity<T: Scalar>(a: &AttentionMatrix<T>, tau: f64) -> f64 {
    let data = a.values.data();
    if data.is_empty() {
        return 0.0;
    }
    let t = lit::<T>(tau);
    data.iter().filter(|&&v| v <= t).count() as f64 / data.len() as f64
}

/// Gradient of [`softmax_rows`] given its output `y`.
pub(crate) fn softmax_rows_backward<T: Scalar>(y: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let n = row_len(y);
    let mut dx = grad.clone();
    if n == 0 {
        return dx;
    }
    dx.data_mut()
        .par_chunks_mut(n)
        .zip(y.data().par_chunks(n))
        .for_each(|(g, yr)| {
            let dot = lane_dot(g, yr);
            for (gi, &yi) in g.iter_mut().zip(yr) {
                *gi = yi * (*gi - dot);
            }
        });
    dx
}

/// Gradient of [`htn_rows`] given its raw scores and output. The clamp
/// contributes its subgradient: 1 on the open interval `(0, 1)`, 0 elsewhere.
/// Fallback rows are constant and pass no gradient.
pub(crate) fn htn_rows_backward<T: Scalar>(
    scores: &Tensor<T>,
    y: &Tensor<T>,
    grad: &Tensor<T>,
) -> Tensor<T> {
    let n = row_len(y);
    let mut dx = grad.clone();
    if n == 0 {
        return dx;
    }
    dx.data_mut()
        .par_chunks_mut(n)
        .zip(y.data().par_chunks(n))
        .zip(scores.data().par_chunks(n))
        .for_each_init(Vec::new, |clamped, ((g, yr), xr)| {
            clamped.clear();
            clamped.extend(xr.iter().map(|&v| clamp_unit(v)));
            let sum = lane_sum(clamped);
            if sum <= T::zero() {
                g.iter_mut().for_each(|v| *v = T::zero());
                return;
            }
            let dot = lane_dot(g, yr);
            for (gi, &xi) in g.iter_mut().zip(xr) {
                *gi = if xi > T::zero() && xi < T::one() {
                    (*gi - dot) / sum
                } else {
                    T::zero()
                };
            }
        });
    dx
}
