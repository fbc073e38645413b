//! Confusion-matrix based evaluation, including the one-vs-all protocol.

use crate::error::{LpgError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// one-vs-all binary accuracy with this class as positive
    pub ova_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// mean over classes of one-vs-all binary accuracy
    pub ova_binary_accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    /// confusion[true][pred]
    pub confusion: Vec<Vec<usize>>,
    pub total: usize,
}

pub fn confusion_from_pairs(pairs: &[(usize, usize)], classes: usize) -> Result<Vec<Vec<usize>>> {
    let mut conf = vec![vec![0usize; classes]; classes];
    for &(truth, pred) in pairs {
        if truth >= classes || pred >= classes {
            return Err(LpgError::schema(format!(
                "label pair ({truth}, {pred}) outside {classes} classes"
            )));
        }
        conf[truth][pred] += 1;
    }
    Ok(conf)
}

pub fn metrics_from_confusion(confusion: Vec<Vec<usize>>) -> Result<MetricsReport> {
    let classes = confusion.len();
    let total: usize = confusion.iter().flatten().sum();
    if total == 0 {
        return Err(LpgError::contract("empty evaluation set".to_string()));
    }
    let trace: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let mut per_class = Vec::with_capacity(classes);
    let mut macro_f1 = 0.0;
    let mut weighted_f1 = 0.0;
    let mut ova_sum = 0.0;
    for c in 0..classes {
        let tp = confusion[c][c];
        let support: usize = confusion[c].iter().sum();
        let predicted: usize = (0..classes).map(|r| confusion[r][c]).sum();
        let fp = predicted - tp;
        let fn_ = support - tp;
        let tn = total - tp - fp - fn_;
        let precision = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
        let recall = if support > 0 { tp as f64 / support as f64 } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        let ova = (tp + tn) as f64 / total as f64;
        macro_f1 += f1 / classes as f64;
        weighted_f1 += f1 * support as f64 / total as f64;
        ova_sum += ova / classes as f64;
        per_class.push(ClassMetrics { precision, recall, f1, support, ova_accuracy: ova });
    }
    Ok(MetricsReport {
        accuracy: trace as f64 / total as f64,
        macro_f1,
        weighted_f1,
        ova_binary_accuracy: ova_sum,
        per_class,
        confusion,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_computed_two_class_confusion() {
        let report = metrics_from_confusion(vec![vec![2, 1], vec![0, 3]]).unwrap();
        assert!((report.accuracy - 5.0 / 6.0).abs() < 1e-12);
        assert!((report.per_class[0].f1 - 0.8).abs() < 1e-12);
        assert!((report.per_class[1].f1 - 6.0 / 7.0).abs() < 1e-12);
        let macro_f1 = (0.8 + 6.0 / 7.0) / 2.0;
        assert!((report.macro_f1 - macro_f1).abs() < 1e-12);
        assert!((macro_f1 - 0.8286).abs() < 1e-4);
        // ova accuracy for C=2 equals plain accuracy in both classes
        assert!((report.ova_binary_accuracy - 5.0 / 6.0).abs() < 1e-12);
        assert_eq!(report.total, 6);
    }

    #[test]
    fn perfect_predictions_score_one_everywhere() {
        let pairs: Vec<(usize, usize)> = (0..12).map(|i| (i % 3, i % 3)).collect();
        let confusion = confusion_from_pairs(&pairs, 3).unwrap();
        let report = metrics_from_confusion(confusion).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.weighted_f1, 1.0);
        assert_eq!(report.ova_binary_accuracy, 1.0);
        assert!(report.per_class.iter().all(|c| c.f1 == 1.0));
    }

    #[test]
    fn perfectly_wrong_binary_predictions_have_zero_ova_accuracy() {
        let pairs = vec![(0, 1), (0, 1), (1, 0), (1, 0)];
        let confusion = confusion_from_pairs(&pairs, 2).unwrap();
        let report = metrics_from_confusion(confusion).unwrap();
        assert_eq!(report.ova_binary_accuracy, 0.0);
        assert_eq!(report.accuracy, 0.0);
    }

    #[test]
    fn confusion_entries_sum_to_pair_count() {
        let pairs = vec![(0, 1), (2, 2), (1, 1), (3, 0), (2, 2)];
        let confusion = confusion_from_pairs(&pairs, 4).unwrap();
        let total: usize = confusion.iter().flatten().sum();
        assert_eq!(total, pairs.len());
        let report = metrics_from_confusion(confusion).unwrap();
        let trace_acc = 3.0 / 5.0;
        assert!((report.accuracy - trace_acc).abs() < 1e-12);
    }

    #[test]
    fn six_class_confusion_is_supported() {
        let pairs: Vec<(usize, usize)> = (0..36).map(|i| (i % 6, (i + i / 6) % 6)).collect();
        let confusion = confusion_from_pairs(&pairs, 6).unwrap();
        let report = metrics_from_confusion(confusion).unwrap();
        assert_eq!(report.per_class.len(), 6);
        assert_eq!(report.confusion.len(), 6);
        assert!(report.accuracy > 0.0 && report.accuracy < 1.0);
    }

    #[test]
    fn empty_confusion_is_contract_error() {
        assert!(metrics_from_confusion(vec![]).is_err());
        assert!(metrics_from_confusion(vec![vec![0, 0], vec![0, 0]]).is_err());
    }

    #[test]
    fn absent_class_contributes_zero_f1_not_nan() {
        // class 1 never appears and is never predicted
        let report = metrics_from_confusion(vec![vec![3, 0], vec![0, 0]]).unwrap();
        assert_eq!(report.per_class[1].f1, 0.0);
        assert!(report.macro_f1.is_finite());
    }

    #[test]
    fn out_of_range_prediction_is_rejected() {
        assert!(confusion_from_pairs(&[(0, 5)], 2).is_err());
        assert!(confusion_from_pairs(&[(5, 0)], 2).is_err());
    }
}
