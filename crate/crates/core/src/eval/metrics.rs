use std::fmt::Write;

use crate::error::{Error, Result};
use crate::model::MALIGNANT;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Counts with malignant as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn record(&mut self, predicted_malignant: bool, label: usize) {
        match (predicted_malignant, label == MALIGNANT) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }

    /// A tile is called malignant when its probability reaches `threshold`.
    pub fn from_predictions(probabilities: &[f64], labels: &[usize], threshold: f64) -> Self {
        let mut cm = Self::default();
        for (&p, &l) in probabilities.iter().zip(labels) {
            cm.record(p >= threshold, l);
        }
        cm
    }
}

/// Sensitivity and specificity are `None` when their denominator is zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub counts: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    Ok(MetricsReport {
        accuracy: (cm.tp + cm.tn) as f64 / total as f64,
        sensitivity: ratio(cm.tp, cm.tp + cm.fn_),
        specificity: ratio(cm.tn, cm.tn + cm.fp),
        counts: *cm,
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or("n/a".to_owned(), |x| format!("{x:.4}"))
}

/// Plain-text table with one row per network.
pub fn comparison_table(rows: &[(String, MetricsReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).chain([7]).max().unwrap_or(7);
    let mut out = format!("{:<width$}  {:>8}  {:>11}  {:>11}\n", "network", "accuracy", "sensitivity", "specificity");
    for (name, m) in rows {
        let _ = writeln!(
            out,
            "{name:<width$}  {:>8}  {:>11}  {:>11}",
            cell(Some(m.accuracy)),
            cell(m.sensitivity),
            cell(m.specificity)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example() {
        let cm = ConfusionMatrix {
            tp: 3,
            fn_: 1,
            tn: 4,
            fp: 2,
        };
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.sensitivity, Some(0.75));
        assert_eq!(m.specificity, Some(4.0 / 6.0));
        assert_eq!(m.accuracy, 0.7);
    }

    #[test]
    fn perfect_and_degenerate() {
        let all = compute_metrics(&ConfusionMatrix {
            tp: 5,
            tn: 5,
            ..Default::default()
        })
        .unwrap();
        assert_eq!((all.accuracy, all.sensitivity, all.specificity), (1.0, Some(1.0), Some(1.0)));
        let neg = compute_metrics(&ConfusionMatrix {
            tn: 3,
            fp: 1,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(neg.sensitivity, None);
        assert_eq!(neg.accuracy, 0.75);
        assert!(matches!(compute_metrics(&ConfusionMatrix::default()), Err(Error::EmptyEvaluation)));
    }

    #[test]
    fn always_malignant_on_balanced_labels() {
        let cm = ConfusionMatrix::from_predictions(&[1.0; 4], &[0, 1, 0, 1], DEFAULT_THRESHOLD);
        let m = compute_metrics(&cm).unwrap();
        assert_eq!((m.accuracy, m.sensitivity, m.specificity), (0.5, Some(1.0), Some(0.0)));
    }

    #[test]
    fn table_shape() {
        let m = compute_metrics(&ConfusionMatrix {
            tp: 1,
            tn: 1,
            ..Default::default()
        })
        .unwrap();
        let t = comparison_table(&[("triresnet".into(), m), ("single_stream".into(), m)]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].contains("accuracy") && lines[0].contains("sensitivity") && lines[0].contains("specificity"));
        assert!(lines.iter().all(|l| l.split_whitespace().count() == 4));
    }
}
