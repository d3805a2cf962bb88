//! Evaluation metrics: Dice with median/IQR aggregation, ROC AUC, and
//! threshold-based sensitivity/specificity.

use std::path::Path;

use num_traits::Float;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volume_io::Volume;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty input")]
    EmptyInput,
    #[error("both classes must be present")]
    SingleClass,
    #[error("{scores} scores for {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
}

/// `2|A∩B| / (|A| + |B|)` over voxels `> 0.5`; 1.0 when both are empty.
pub fn dice_binary(a: &Volume, b: &Volume) -> Result<f64, MetricsError> {
    if a.dims() != b.dims() {
        return Err(MetricsError::ShapeMismatch(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(dice_slices(a.data(), b.data()))
}

pub(crate) fn dice_slices<T: Float>(a: &[T], b: &[T]) -> f64 {
    let half = T::from(0.5).unwrap();
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x > half, y > half);
        inter += (x && y) as usize;
        na += x as usize;
        nb += y as usize;
    }
    if na + nb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (na + nb) as f64
    }
}

/// Quantile of sorted data by linear interpolation at position `(n−1)·q`.
pub fn quantile_sorted<T: Float>(sorted: &[T], q: f64) -> T {
    let pos = (sorted.len() - 1) as f64 * q;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = T::from(pos - lo as f64).unwrap();
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// `(median, q1, q3)`.
pub fn median_iqr<T: Float>(values: &[T]) -> Result<(T, T, T), MetricsError> {
    if values.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite values"));
    Ok((quantile_sorted(&v, 0.5), quantile_sorted(&v, 0.25), quantile_sorted(&v, 0.75)))
}

fn check_binary<T>(scores: &[T], labels: &[u8]) -> Result<(usize, usize), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MetricsError::SingleClass);
    }
    Ok((pos, neg))
}

/// Area under the ROC curve by trapezoidal integration over the curve
/// traced by sweeping the threshold down through the distinct scores. Tied
/// scores form one diagonal segment.
pub fn roc_auc<T: Float>(scores: &[T], labels: &[u8]) -> Result<f64, MetricsError> {
    let (p, n) = check_binary(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    // Twice the area in units of one (tp, fp) cell, kept exact in integers.
    let (mut tp, mut fp, mut area2) = (0u64, 0u64, 0u64);
    let mut i = 0;
    while i < idx.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[idx[i]];
        while i < idx.len() && scores[idx[i]] == s {
            if labels[idx[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area2 += (fp - fp0) * (tp + tp0);
    }
    Ok(area2 as f64 / (2 * p * n) as f64)
}

/// Mann–Whitney form: fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn roc_auc_pairwise<T: Float>(scores: &[T], labels: &[u8]) -> Result<f64, MetricsError> {
    let (p, n) = check_binary(scores, labels)?;
    let mut twice = 0u64;
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] == 1 {
                continue;
            }
            twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
        }
    }
    Ok(twice as f64 / (2 * p * n) as f64)
}

/// Operating point chosen by Youden's J.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    #[serde(with = "crate::jsonfloat")]
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Threshold maximizing `sens + spec − 1` among `±∞` and the midpoints
/// between adjacent distinct scores; ties prefer higher sensitivity, then
/// the lower threshold. A score is positive when `score ≥ threshold`.
pub fn youden_threshold<T: Float>(scores: &[T], labels: &[u8]) -> Result<OperatingPoint, MetricsError> {
    check_binary(scores, labels)?;
    let mut distinct: Vec<f64> = scores.iter().map(|s| s.to_f64().unwrap()).collect();
    distinct.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    distinct.dedup();
    let mut candidates = vec![f64::NEG_INFINITY, f64::INFINITY];
    candidates.extend(distinct.windows(2).map(|w| w[0] + (w[1] - w[0]) / 2.0));

    let mut best: Option<(f64, OperatingPoint)> = None;
    for thr in candidates {
        let (sens, spec, _) = confusion_at(scores, labels, thr)?;
        let j = sens + spec - 1.0;
        let better = match &best {
            None => true,
            Some((bj, bp)) => {
                j > *bj || (j == *bj && (sens > bp.sensitivity || (sens == bp.sensitivity && thr < bp.threshold)))
            }
        };
        if better {
            best = Some((
                j,
                OperatingPoint {
                    threshold: thr,
                    sensitivity: sens,
                    specificity: spec,
                },
            ));
        }
    }
    Ok(best.unwrap().1)
}

/// `(sensitivity, specificity, accuracy)` with `score ≥ threshold` positive.
/// A rate whose denominator is empty is reported as 0.
pub fn confusion_at<T: Float>(scores: &[T], labels: &[u8], threshold: f64) -> Result<(f64, f64, f64), MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    let (mut tp, mut tn, mut p, mut n) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s.to_f64().unwrap() >= threshold;
        if l == 1 {
            p += 1;
            tp += pred as usize;
        } else {
            n += 1;
            tn += !pred as usize;
        }
    }
    let rate = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok((rate(tp, p), rate(tn, n), rate(tp + tn, p + n)))
}

/// One evaluated case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseResult {
    pub case_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub label: Option<u8>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub crop_origin: Option<[usize; 3]>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub fallback_used: Option<bool>,
}

impl CaseResult {
    pub fn new(case_id: impl Into<String>) -> Self {
        CaseResult {
            case_id: case_id.into(),
            dice: None,
            score: None,
            label: None,
            crop_origin: None,
            fallback_used: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub median_dice: Option<f64>,
    pub dice_q1: Option<f64>,
    pub dice_q3: Option<f64>,
    pub auc: Option<f64>,
    #[serde(with = "crate::jsonfloat::option", default)]
    pub threshold: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub per_case: Vec<CaseResult>,
    pub aggregate: Aggregate,
}

impl EvalReport {
    /// Aggregates the per-case results. Classification metrics are filled
    /// when scored cases of both classes exist; sensitivity/specificity use
    /// `threshold` if given, otherwise the Youden point of these cases.
    pub fn from_cases(
        model: impl Into<String>,
        dataset: impl Into<String>,
        per_case: Vec<CaseResult>,
        threshold: Option<f64>,
    ) -> Self {
        let mut agg = Aggregate::default();
        let dice: Vec<f64> = per_case.iter().filter_map(|c| c.dice).collect();
        if let Ok((m, q1, q3)) = median_iqr(&dice) {
            (agg.median_dice, agg.dice_q1, agg.dice_q3) = (Some(m), Some(q1), Some(q3));
        }
        let (scores, labels): (Vec<f64>, Vec<u8>) =
            per_case.iter().filter_map(|c| Some((c.score?, c.label?))).unzip();
        if let Ok(auc) = roc_auc(&scores, &labels) {
            agg.auc = Some(auc);
            let thr = match threshold {
                Some(t) => Some(t),
                None => youden_threshold(&scores, &labels).ok().map(|p| p.threshold),
            };
            if let Some(t) = thr {
                let (se, sp, acc) = confusion_at(&scores, &labels, t).expect("lengths match");
                agg.threshold = Some(t);
                (agg.sensitivity, agg.specificity, agg.accuracy) = (Some(se), Some(sp), Some(acc));
            }
        } else if let (Some(t), false) = (threshold, scores.is_empty()) {
            let (se, sp, acc) = confusion_at(&scores, &labels, t).expect("lengths match");
            agg.threshold = Some(t);
            (agg.sensitivity, agg.specificity, agg.accuracy) = (Some(se), Some(sp), Some(acc));
        }
        EvalReport {
            model: model.into(),
            dataset: dataset.into(),
            per_case,
            aggregate: agg,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn write_json(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_json())
    }

    pub const TABLE_HEADER: &'static str = "model,dataset,median_dice,q1,q3";

    /// `model,dataset,median_dice,q1,q3` (empty fields when Dice is absent).
    pub fn table_row(&self) -> String {
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        format!(
            "{},{},{},{},{}",
            self.model,
            self.dataset,
            f(self.aggregate.median_dice),
            f(self.aggregate.dice_q1),
            f(self.aggregate.dice_q3)
        )
    }

    pub fn write_table_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, format!("{}\n{}\n", Self::TABLE_HEADER, self.table_row()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vol(v: &[f32]) -> Volume {
        Volume::new([v.len(), 1, 1], [1.0; 3], v.to_vec()).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = vol(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0]);
        assert_eq!(dice_binary(&a, &a).unwrap(), 1.0);
        let b = vol(&[0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(dice_binary(&a, &b).unwrap(), 0.5);
        assert_eq!(dice_binary(&b, &a).unwrap(), 0.5);
        let c = vol(&[0.0, 0.0, 0.0, 0.0, 1.0, 1.0]);
        assert_eq!(dice_binary(&a, &c).unwrap(), 0.0);
        let e = vol(&[0.0; 6]);
        assert_eq!(dice_binary(&e, &e).unwrap(), 1.0);
        assert!(dice_binary(&a, &vol(&[0.0; 5])).is_err());
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(median_iqr(&[5.0]).unwrap(), (5.0, 5.0, 5.0));
        assert_eq!(median_iqr(&[5.0, 1.0, 4.0, 2.0, 3.0]).unwrap(), (3.0, 2.0, 4.0));
        assert_eq!(median_iqr(&[1.0, 2.0, 3.0, 4.0]).unwrap(), (2.5, 1.75, 3.25));
        assert_eq!(median_iqr::<f64>(&[]), Err(MetricsError::EmptyInput));
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.4; 5], &[1, 0, 1, 0, 0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc_pairwise(&[0.9, 0.8, 0.3], &[1, 0, 1]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.1, 0.2], &[1, 1]), Err(MetricsError::SingleClass));
    }

    #[test]
    fn youden_examples() {
        let p = youden_threshold(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap();
        assert_eq!((p.sensitivity, p.specificity), (1.0, 1.0));
        assert!(p.threshold > 0.3 && p.threshold <= 0.8);

        let p = youden_threshold(&[0.5; 4], &[1, 0, 1, 0]).unwrap();
        assert_eq!(p.sensitivity + p.specificity, 1.0);
        // J = 0 everywhere; higher sensitivity wins
        assert_eq!(p.sensitivity, 1.0);

        let p = youden_threshold(&[0.95, 0.6, 0.7, 0.2, 0.1], &[1, 0, 0, 0, 0]).unwrap();
        assert_eq!(p.sensitivity, 1.0);
        assert_eq!(p.specificity, 1.0);
    }

    #[test]
    fn confusion_examples() {
        let s = [0.9, 0.1];
        let l = [1, 0];
        assert_eq!(confusion_at(&s, &l, f64::NEG_INFINITY).unwrap(), (1.0, 0.0, 0.5));
        assert_eq!(confusion_at(&s, &l, f64::INFINITY).unwrap(), (0.0, 1.0, 0.5));
        assert_eq!(confusion_at(&s, &l, 0.5).unwrap(), (1.0, 1.0, 1.0));
        assert_eq!(confusion_at(&[0.3], &[0], 0.5).unwrap(), (0.0, 1.0, 1.0));
    }

    #[test]
    fn report_json_and_table() {
        let mut cases = Vec::new();
        for (i, (d, s, l)) in [(0.8, 0.9, 1), (0.6, 0.2, 0), (0.7, 0.7, 1), (0.9, 0.4, 0)].iter().enumerate() {
            let mut c = CaseResult::new(format!("case{i:04}"));
            c.dice = Some(*d);
            c.score = Some(*s);
            c.label = Some(*l);
            cases.push(c);
        }
        let r = EvalReport::from_cases("v2netcls", "validation", cases, None);
        assert_eq!(r.aggregate.auc, Some(1.0));
        assert_eq!(r.aggregate.median_dice, Some(0.75));
        assert_eq!(r.table_row(), "v2netcls,validation,0.7500,0.6750,0.8250");
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);

        let mut one = CaseResult::new("x");
        one.score = Some(0.5);
        one.label = Some(1);
        let r = EvalReport::from_cases("m", "d", vec![one], Some(f64::NEG_INFINITY));
        assert!(r.to_json().contains("\"-inf\""));
        assert_eq!(r.aggregate.sensitivity, Some(1.0));
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back.aggregate.threshold, Some(f64::NEG_INFINITY));
    }
}
