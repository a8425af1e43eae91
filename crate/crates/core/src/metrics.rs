//! Ranking metrics for pixel-level segmentation and the accuracy-under-
//! occlusion summary.

use alloc::vec::Vec;

use crate::error::{Error, Result};

fn check_lengths(scores: usize, labels: usize) -> Result<()> {
    if scores != labels {
        return Err(Error::LengthMismatch {
            left: scores,
            right: labels,
        });
    }
    Ok(())
}

/// Area under the ROC curve in its Mann-Whitney form: the fraction of
/// (positive, negative) pairs ranked correctly, ties counting one half.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count() as u64;
    let negatives = labels.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::SingleClassLabels);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_unstable_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the Mann-Whitney U statistic, kept integral.
    let mut twice_u = 0u64;
    let mut neg_below = 0u64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u64, 0u64);
        while j < order.len() && scores[order[j]].total_cmp(&scores[order[i]]).is_eq() {
            if labels[order[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        twice_u += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    Ok(twice_u as f64 / (2 * positives * negatives) as f64)
}

/// Average precision `sum_k (R_k - R_{k-1}) P_k` over the ranking by
/// descending score, ties broken by original index.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut ap = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if labels[i] {
            hits += 1;
            ap += (hits as f64 / (rank + 1) as f64) / positives as f64;
        }
    }
    Ok(ap)
}

/// Fraction of exact matches.
pub fn accuracy<T: PartialEq>(predictions: &[T], labels: &[T]) -> Result<f64> {
    check_lengths(predictions.len(), labels.len())?;
    if predictions.is_empty() {
        return Err(Error::Empty("accuracy input"));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Accuracy as a function of occlusion level.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalCurve {
    levels: Vec<f64>,
    accuracies: Vec<f64>,
}

impl EvalCurve {
    /// Levels must be strictly increasing within `[0, 1]`.
    pub fn new(levels: Vec<f64>, accuracies: Vec<f64>) -> Result<Self> {
        check_lengths(levels.len(), accuracies.len())?;
        if levels.is_empty() {
            return Err(Error::Empty("evaluation curve"));
        }
        for &v in levels.iter().chain(&accuracies) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::OutOfRange { value: v });
            }
        }
        if levels.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidParameter("levels must be strictly increasing".into()));
        }
        Ok(Self { levels, accuracies })
    }

    /// Builds a curve from `(level, accuracy)` points in any order.
    pub fn from_points(mut points: Vec<(f64, f64)>) -> Result<Self> {
        points.sort_by(|a, b| a.0.total_cmp(&b.0));
        let (levels, accuracies) = points.into_iter().unzip();
        Self::new(levels, accuracies)
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn accuracies(&self) -> &[f64] {
        &self.accuracies
    }
}

/// Trapezoidal area under the accuracy curve divided by the level span.
pub fn auc_occ(curve: &EvalCurve) -> Result<f64> {
    let l = curve.levels();
    let a = curve.accuracies();
    let span = l[l.len() - 1] - l[0];
    if span <= 0.0 {
        return Err(Error::InvalidParameter("auc_occ needs at least two distinct levels".into()));
    }
    let area: f64 = (1..l.len())
        .map(|i| (l[i] - l[i - 1]) * (a[i] + a[i - 1]) / 2.0)
        .sum();
    Ok(area / span)
}
