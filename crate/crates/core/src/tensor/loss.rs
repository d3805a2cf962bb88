//! Fused loss ops. Each returns a single-element tensor.

use super::ops::sigmoid_scalar;
use super::{mismatch, Tensor, TensorError};
use crate::scalar::Scalar;

/// Smoothing constant added to both numerator and denominator of the Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// `1 − (2·Σp·g + ε) / (Σp² + Σg² + ε)` summed over every element of the batch.
pub fn soft_dice_loss<T: Scalar>(p: &Tensor<T>, g: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if p.shape() != g.shape() {
        return Err(mismatch(
            "soft_dice_loss",
            format!("{:?} vs {:?}", p.shape(), g.shape()),
        ));
    }
    let eps = T::from_f64_lossy(DICE_EPS);
    let two = T::from_f64_lossy(2.0);
    let (mut pg, mut pp, mut gg) = (T::zero(), T::zero(), T::zero());
    for (&a, &b) in p.data().iter().zip(g.data()) {
        pg += a * b;
        pp += a * a;
        gg += b * b;
    }
    let num = two * pg + eps;
    let den = pp + gg + eps;
    let loss = T::one() - num / den;
    let (pv, gv) = (p.data_arc(), g.data_arc());
    Tensor::from_op(
        "soft_dice_loss",
        vec![1],
        vec![loss],
        vec![p.clone(), g.clone()],
        move |go, need| {
            // ∂L/∂pᵢ = −(2gᵢ·den − num·2pᵢ) / den²
            let scale = go[0] / (den * den);
            let dp = need[0].then(|| {
                pv.iter()
                    .zip(gv.iter())
                    .map(|(&a, &b)| -scale * (two * b * den - num * two * a))
                    .collect()
            });
            let dg = need[1].then(|| {
                pv.iter()
                    .zip(gv.iter())
                    .map(|(&a, &b)| -scale * (two * a * den - num * two * b))
                    .collect()
            });
            vec![dp, dg]
        },
    )
}

#[inline]
fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Class-weighted binary cross-entropy on logits, averaged over the batch:
/// `−[w₊·y·log σ(z) + w₋·(1−y)·log(1−σ(z))]`, evaluated as softplus terms.
pub fn weighted_bce<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    w_pos: f64,
    w_neg: f64,
) -> Result<Tensor<T>, TensorError> {
    if logits.numel() != labels.len() {
        return Err(mismatch(
            "weighted_bce",
            format!("{} logits for {} labels", logits.numel(), labels.len()),
        ));
    }
    if !(w_pos > 0.0 && w_neg > 0.0) {
        return Err(mismatch("weighted_bce", format!("weights {w_pos}, {w_neg} must be > 0")));
    }
    let (wp, wn) = (T::from_f64_lossy(w_pos), T::from_f64_lossy(w_neg));
    let inv_n = T::one() / T::from_usize(labels.len()).unwrap();
    let labels = labels.to_vec();
    let mut total = T::zero();
    for (&z, &y) in logits.data().iter().zip(&labels) {
        total += if y == 1 { wp * softplus(-z) } else { wn * softplus(z) };
    }
    let zv = logits.data_arc();
    Tensor::from_op(
        "weighted_bce",
        vec![1],
        vec![total * inv_n],
        vec![logits.clone()],
        move |go, _| {
            let k = go[0] * inv_n;
            vec![Some(
                zv.iter()
                    .zip(&labels)
                    .map(|(&z, &y)| {
                        let s = sigmoid_scalar(z);
                        if y == 1 {
                            k * wp * (s - T::one())
                        } else {
                            k * wn * s
                        }
                    })
                    .collect(),
            )]
        },
    )
}

/// Batch mean of `−log softmax(z)[label]` for `logits: [N, K]`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<Tensor<T>, TensorError> {
    let [n, k] = logits.shape()[..] else {
        return Err(mismatch(
            "softmax_cross_entropy",
            format!("expected [N, K], got {:?}", logits.shape()),
        ));
    };
    if labels.len() != n || labels.iter().any(|&l| l >= k) {
        return Err(mismatch(
            "softmax_cross_entropy",
            format!("labels {labels:?} for logits {:?}", logits.shape()),
        ));
    }
    let inv_n = T::one() / T::from_usize(n).unwrap();
    let mut probs = vec![T::zero(); n * k];
    let mut total = T::zero();
    for ((row, pr), &l) in logits.data().chunks_exact(k).zip(probs.chunks_exact_mut(k)).zip(labels) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
        let lse = m + z.ln();
        total += lse - row[l];
        for (p, &v) in pr.iter_mut().zip(row) {
            *p = (v - lse).exp();
        }
    }
    let labels = labels.to_vec();
    Tensor::from_op(
        "softmax_cross_entropy",
        vec![1],
        vec![total * inv_n],
        vec![logits.clone()],
        move |go, _| {
            let s = go[0] * inv_n;
            let mut d = probs.clone();
            for (row, &l) in d.chunks_exact_mut(k).zip(&labels) {
                row[l] -= T::one();
                row.iter_mut().for_each(|v| *v *= s);
            }
            vec![Some(d)]
        },
    )
}
