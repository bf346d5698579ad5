//! Binary classification metrics: confusion counts, accuracy, precision,
//! recall, F1, Cohen's kappa and ROC AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl ConfusionCounts {
    pub fn n(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Threshold probabilities into a confusion matrix; a sample is predicted
/// positive iff `prob >= threshold`.
pub fn confusion_counts(probs: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionCounts> {
    if probs.len() != labels.len() {
        return Err(Error::Shape {
            op: "confusion_counts",
            lhs: vec![probs.len()],
            rhs: vec![labels.len()],
        });
    }
    if !(0.0..1.0).contains(&threshold) || threshold == 0.0 {
        return Err(Error::Config(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fn_: 0,
    };
    for (&p, &y) in probs.iter().zip(labels) {
        let pred = p >= threshold;
        match (pred, y) {
            (true, 1) => c.tp += 1,
            (true, 0) => c.fp += 1,
            (false, 0) => c.tn += 1,
            (false, 1) => c.fn_ += 1,
            _ => return Err(Error::Config(format!("label {y} is not binary"))),
        }
    }
    Ok(c)
}

/// `(accuracy, precision, recall, f1)`. Ratios with zero denominators are
/// defined as 0.
pub fn classification_metrics(c: &ConfusionCounts) -> (f64, f64, f64, f64) {
    let n = c.n() as f64;
    let accuracy = if n > 0.0 { (c.tp + c.tn) as f64 / n } else { 0.0 };
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (accuracy, precision, recall, f1)
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Cohen's kappa `(p_o - p_e) / (1 - p_e)`; 0 when chance agreement is 1.
pub fn cohens_kappa(preds: &[u8], labels: &[u8]) -> Result<f64> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(Error::Shape {
            op: "cohens_kappa",
            lhs: vec![preds.len()],
            rhs: vec![labels.len()],
        });
    }
    let n = preds.len() as f64;
    let mut agree = 0usize;
    let (mut pred_pos, mut label_pos) = (0usize, 0usize);
    for (&p, &y) in preds.iter().zip(labels) {
        agree += (p == y) as usize;
        pred_pos += (p == 1) as usize;
        label_pos += (y == 1) as usize;
    }
    let p_o = agree as f64 / n;
    let pp = pred_pos as f64 / n;
    let lp = label_pos as f64 / n;
    let p_e = pp * lp + (1.0 - pp) * (1.0 - lp);
    if (1.0 - p_e).abs() < 1e-15 {
        return Ok(0.0);
    }
    Ok((p_o - p_e) / (1.0 - p_e))
}

/// ROC AUC via the Mann-Whitney statistic: the probability a random
/// positive outranks a random negative, ties counted one half. Computed
/// from average ranks; exactly equivalent to pairwise counting.
pub fn roc_auc(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(Error::Shape {
            op: "roc_auc",
            lhs: vec![probs.len()],
            rhs: vec![labels.len()],
        });
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC AUC needs at least one positive and one negative label".into(),
        ));
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]));
    // average ranks over tie groups (1-based ranks)
    let mut rank_sum_pos = 0.0;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && probs[order[j + 1]] == probs[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Full metric report at one threshold. `auc` is `None` when the labels
/// hold a single class and the metric is undefined.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub threshold: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub kappa: f64,
    pub auc: Option<f64>,
}

pub fn metrics_report(probs: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsReport> {
    let c = confusion_counts(probs, labels, threshold)?;
    let (accuracy, precision, recall, f1) = classification_metrics(&c);
    let preds: Vec<u8> = probs.iter().map(|&p| (p >= threshold) as u8).collect();
    let kappa = cohens_kappa(&preds, labels)?;
    let auc = match roc_auc(probs, labels) {
        Ok(v) => Some(v),
        Err(Error::UndefinedMetric(_)) => None,
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        threshold,
        accuracy,
        precision,
        recall,
        f1,
        kappa,
        auc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confusion_basics() {
        let c = confusion_counts(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert_eq!((c.tp, c.fp, c.tn, c.fn_), (1, 0, 1, 0));
    }

    #[test]
    fn threshold_is_inclusive() {
        let c = confusion_counts(&[0.5], &[1], 0.5).unwrap();
        assert_eq!(c.tp, 1);
    }

    #[test]
    fn threshold_boundary_cases() {
        let c4 = confusion_counts(&[0.45], &[1], 0.4).unwrap();
        assert_eq!(c4.tp, 1);
        let c5 = confusion_counts(&[0.45], &[1], 0.5).unwrap();
        assert_eq!(c5.fn_, 1);
    }

    #[test]
    fn perfect_metrics() {
        let c = ConfusionCounts { tp: 1, fp: 0, tn: 1, fn_: 0 };
        assert_eq!(classification_metrics(&c), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn zero_denominator_convention() {
        let c = ConfusionCounts { tp: 0, fp: 0, tn: 5, fn_: 2 };
        let (_, precision, _, f1) = classification_metrics(&c);
        assert_eq!(precision, 0.0);
        assert_eq!(f1, 0.0);
    }

    #[test]
    fn worked_example_3_1_4_2() {
        let c = ConfusionCounts { tp: 3, fp: 1, tn: 4, fn_: 2 };
        let (acc, prec, rec, f1) = classification_metrics(&c);
        assert!((acc - 0.7).abs() < 1e-12);
        assert!((prec - 0.75).abs() < 1e-12);
        assert!((rec - 0.6).abs() < 1e-12);
        assert!((f1 - 2.0 * (0.75 * 0.6) / 1.35).abs() < 1e-12);
    }

    #[test]
    fn kappa_perfect_agreement() {
        assert_eq!(cohens_kappa(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn kappa_chance_level() {
        let preds = [1, 1, 1, 1];
        let labels = [1, 1, 0, 0];
        assert_eq!(cohens_kappa(&preds, &labels).unwrap(), 0.0);
    }

    #[test]
    fn kappa_perfect_disagreement() {
        let preds = [1, 1, 0, 0];
        let labels = [0, 0, 1, 1];
        assert_eq!(cohens_kappa(&preds, &labels).unwrap(), -1.0);
    }

    #[test]
    fn kappa_all_same_class_returns_zero() {
        // p_e == 1: both raters constant
        assert_eq!(cohens_kappa(&[1, 1], &[1, 1]).unwrap(), 0.0);
    }

    #[test]
    fn auc_perfect_separation() {
        let auc = roc_auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let auc = roc_auc(&[0.5, 0.5, 0.5, 0.5], &[0, 1, 0, 1]).unwrap();
        assert_eq!(auc, 0.5);
    }

    #[test]
    fn auc_worked_example() {
        let auc = roc_auc(&[0.2, 0.4, 0.6, 0.8], &[0, 1, 0, 1]).unwrap();
        assert_eq!(auc, 0.75);
    }

    #[test]
    fn auc_single_class_undefined() {
        assert!(matches!(
            roc_auc(&[0.2, 0.4], &[1, 1]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn metrics_are_permutation_invariant() {
        let probs = [0.9, 0.2, 0.6, 0.4, 0.7];
        let labels = [1u8, 0, 1, 0, 0];
        let a = metrics_report(&probs, &labels, 0.5).unwrap();
        let perm = [3usize, 0, 4, 2, 1];
        let probs_p: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
        let labels_p: Vec<u8> = perm.iter().map(|&i| labels[i]).collect();
        let b = metrics_report(&probs_p, &labels_p, 0.5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn auc_invariant_under_monotone_transform() {
        let probs = [0.11, 0.42, 0.37, 0.88, 0.53];
        let labels = [0, 1, 0, 1, 1];
        let a = roc_auc(&probs, &labels).unwrap();
        let squashed: Vec<f64> = probs.iter().map(|p| p.powi(3)).collect();
        let b = roc_auc(&squashed, &labels).unwrap();
        assert_eq!(a, b);
    }
}
