//! Classification metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub count: usize,
    pub macro_f1: f64,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub count: usize,
    pub accuracy: f64,
    pub macro_f1: f64,
    /// F1 of the designated positive class.
    pub binary_f1_positive: f64,
    pub positive_class: usize,
    pub recall_at_k: f64,
    pub k: usize,
    pub per_class: Vec<ClassStats>,
    /// Instances longer than the median length.
    pub long_slice: Option<SliceMetrics>,
    /// The complement of `long_slice`.
    pub short_slice: Option<SliceMetrics>,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Index of the largest score; the first one wins ties.
pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// Per-class precision/recall/F1. A class with no true and no predicted
/// instances gets F1 = 0 and still counts in the macro mean.
pub fn per_class(preds: &[usize], labels: &[usize], classes: usize) -> Vec<ClassStats> {
    let mut tp = vec![0usize; classes];
    let mut pred_n = vec![0usize; classes];
    let mut true_n = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        pred_n[p] += 1;
        true_n[y] += 1;
        if p == y {
            tp[p] += 1;
        }
    }
    (0..classes)
        .map(|c| {
            let precision = ratio(tp[c], pred_n[c]);
            let recall = ratio(tp[c], true_n[c]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassStats {
                precision,
                recall,
                f1,
                support: true_n[c],
            }
        })
        .collect()
}

pub fn macro_f1(preds: &[usize], labels: &[usize], classes: usize) -> f64 {
    let s = per_class(preds, labels, classes);
    s.iter().map(|c| c.f1).sum::<f64>() / classes as f64
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    ratio(preds.iter().zip(labels).filter(|(p, y)| p == y).count(), labels.len())
}

/// Share of instances whose label is among the `k` highest scores. Ties at
/// the cut-off are broken towards lower class indices.
pub fn recall_at_k(scores: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(s, &y)| {
            let better = s
                .iter()
                .enumerate()
                .filter(|&(i, &v)| v > s[y] || (v == s[y] && i < y))
                .count();
            better < k
        })
        .count();
    ratio(hits, labels.len())
}

/// Full report from score vectors. `lengths` (per-instance token counts)
/// enables the above-median slice.
pub fn evaluate(
    scores: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    positive_class: usize,
    lengths: Option<&[usize]>,
) -> Result<MetricsReport> {
    if scores.len() != labels.len() {
        return Err(Error::dim(
            "evaluate",
            format!("{} score rows vs {} labels", scores.len(), labels.len()),
        ));
    }
    let classes = scores.first().map_or(0, Vec::len);
    if classes < 2 {
        return Err(Error::Config("evaluation needs at least 2 classes".into()));
    }
    if k == 0 || k > classes {
        return Err(Error::Config(format!("recall@k needs 1 <= k <= {classes}, got {k}")));
    }
    if positive_class >= classes {
        return Err(Error::Config(format!(
            "positive class {positive_class} out of range for {classes} classes"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Index {
            op: "evaluate",
            index: bad,
            bound: classes,
        });
    }
    let preds: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
    let stats = per_class(&preds, labels, classes);
    let slices = match lengths {
        Some(len) if len.len() == labels.len() && !len.is_empty() => {
            let mut sorted = len.to_vec();
            sorted.sort_unstable();
            let median = crate::data::budget::quantile(&sorted, 0.5);
            let slice = |long: bool| {
                let idx: Vec<usize> = (0..len.len())
                    .filter(|&i| (len[i] as f64 > median) == long)
                    .collect();
                let p: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
                let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
                SliceMetrics {
                    count: idx.len(),
                    macro_f1: macro_f1(&p, &y, classes),
                    accuracy: accuracy(&p, &y),
                }
            };
            Some((slice(true), slice(false)))
        }
        _ => None,
    };
    Ok(MetricsReport {
        count: labels.len(),
        accuracy: accuracy(&preds, labels),
        macro_f1: stats.iter().map(|c| c.f1).sum::<f64>() / classes as f64,
        binary_f1_positive: stats[positive_class].f1,
        positive_class,
        recall_at_k: recall_at_k(scores, labels, k),
        k,
        per_class: stats,
        long_slice: slices.as_ref().map(|s| s.0.clone()),
        short_slice: slices.map(|s| s.1),
    })
}
