//! Confusion matrices and the classification metrics reported for every run.
//!
//! Per-class terms that are undefined (a class with no true examples, or a
//! `0/0` F1) count as zero. Serialized reports use the key names of
//! [`MetricsReport`]'s fields verbatim.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts indexed by (true class, predicted class).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "a confusion matrix needs at least 2 classes, got {num_classes}"
            )));
        }
        Ok(Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        })
    }

    /// Builds a matrix from explicit rows (true class major).
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let mut cm = Self::new(rows.len())?;
        for (r, row) in rows.iter().enumerate() {
            if row.len() != rows.len() {
                return Err(Error::InvalidInput("confusion matrix must be square".into()));
            }
            cm.counts[r * rows.len()..(r + 1) * rows.len()].copy_from_slice(row);
        }
        Ok(cm)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.num_classes + predicted]
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.num_classes + predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Row sums: number of true examples per class.
    pub fn support(&self) -> Vec<u64> {
        self.counts.chunks(self.num_classes).map(|r| r.iter().sum()).collect()
    }

    fn column_sum(&self, c: usize) -> u64 {
        (0..self.num_classes).map(|r| self.get(r, c)).sum()
    }
}

pub fn confusion(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(num_classes)?;
    for (&p, &y) in predictions.iter().zip(labels) {
        if p >= num_classes || y >= num_classes {
            return Err(Error::InvalidInput(format!(
                "class index out of range (pred {p}, label {y}, C = {num_classes})"
            )));
        }
        cm.add(y, p);
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Balanced accuracy: mean per-class recall.
    pub bacc: f64,
    pub acc: f64,
    /// Mean one-vs-rest binary accuracy.
    pub acc_star: f64,
    pub macro_f1: f64,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub binary_accuracy: Vec<f64>,
    pub support: Vec<u64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidInput("no examples in confusion matrix".into()));
    }
    let c = cm.num_classes;
    let support = cm.support();
    let mut recall = Vec::with_capacity(c);
    let mut f1 = Vec::with_capacity(c);
    let mut binary_accuracy = Vec::with_capacity(c);
    let mut trace = 0;
    for (k, &positives) in support.iter().enumerate() {
        let tp = cm.get(k, k);
        let fn_ = positives - tp;
        let fp = cm.column_sum(k) - tp;
        let tn = total - tp - fn_ - fp;
        trace += tp;
        recall.push(ratio(tp, tp + fn_));
        f1.push(ratio(2 * tp, 2 * tp + fp + fn_));
        binary_accuracy.push(ratio(tp + tn, total));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / c as f64;
    Ok(MetricsReport {
        bacc: mean(&recall),
        acc: ratio(trace, total),
        acc_star: mean(&binary_accuracy),
        macro_f1: mean(&f1),
        recall,
        f1,
        binary_accuracy,
        support,
    })
}

/// Convenience: metrics straight from prediction/label pairs.
pub fn evaluate_predictions(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<MetricsReport> {
    compute_metrics(&confusion(predictions, labels, num_classes)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Recomputes every metric by scanning raw pairs, without a matrix.
    fn oracle(pred: &[usize], truth: &[usize], c: usize) -> (f64, f64, f64, f64) {
        let n = pred.len() as f64;
        let (mut bacc, mut acc_star, mut f1) = (0.0, 0.0, 0.0);
        for k in 0..c {
            let tp = pred.iter().zip(truth).filter(|(p, t)| **p == k && **t == k).count() as f64;
            let pos = truth.iter().filter(|t| **t == k).count() as f64;
            let pp = pred.iter().filter(|p| **p == k).count() as f64;
            let agree = pred.iter().zip(truth).filter(|(p, t)| (**p == k) == (**t == k)).count() as f64;
            bacc += if pos > 0.0 { tp / pos } else { 0.0 };
            f1 += if pos + pp > 0.0 { 2.0 * tp / (pos + pp) } else { 0.0 };
            acc_star += agree / n;
        }
        let acc = pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / n;
        (bacc / c as f64, acc, acc_star / c as f64, f1 / c as f64)
    }

    #[test]
    fn perfect_classifier() {
        let y = [0, 1, 2, 2, 1, 0, 0];
        let cm = confusion(&y, &y, 3).unwrap();
        assert!((0..3).all(|r| (0..3).all(|c| r == c || cm.get(r, c) == 0)));
        let m = compute_metrics(&cm).unwrap();
        assert_eq!((m.bacc, m.acc, m.acc_star, m.macro_f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn majority_predictor() {
        let cm = ConfusionMatrix::from_counts(&[vec![80, 0, 0], vec![10, 0, 0], vec![10, 0, 0]]).unwrap();
        assert_eq!(cm.support(), vec![80, 10, 10]);
        let m = compute_metrics(&cm).unwrap();
        assert_eq!(m.bacc, 1.0 / 3.0);
        assert_eq!(m.acc, 0.8);
        // (0.8 + 0.9 + 0.9) / 3 and (2·80/(160+20) + 0 + 0) / 3
        assert!((m.acc_star - 2.6 / 3.0).abs() < 1e-15);
        assert!((m.acc_star - 0.8667).abs() < 1e-4);
        assert!((m.macro_f1 - 160.0 / 180.0 / 3.0).abs() < 1e-15);
        assert!((m.macro_f1 - 0.2963).abs() < 1e-4);
    }

    #[test]
    fn zero_convention_for_absent_class() {
        let m = evaluate_predictions(&[0, 1, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(m.recall[2], 0.0);
        assert_eq!(m.f1[2], 0.0);
        assert_eq!(m.binary_accuracy[2], 1.0);
        assert!((m.bacc - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn input_validation() {
        assert!(confusion(&[0], &[0, 1], 2).is_err());
        assert!(confusion(&[2], &[0], 2).is_err());
        assert!(ConfusionMatrix::new(1).is_err());
        assert!(compute_metrics(&ConfusionMatrix::new(2).unwrap()).is_err());
    }

    #[test]
    fn json_keys_are_stable() {
        let m = evaluate_predictions(&[0, 1], &[0, 1], 2).unwrap();
        let v = serde_json::to_value(&m).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        for k in [
            "bacc",
            "acc",
            "acc_star",
            "macro_f1",
            "recall",
            "f1",
            "binary_accuracy",
            "support",
        ] {
            assert!(keys.contains(&k), "{k}");
        }
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<(usize, usize)>)> {
        (2usize..=10).prop_flat_map(|c| (Just(c), prop::collection::vec((0..c, 0..c), 1..=500)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn agrees_with_oracle((c, pairs) in instance()) {
            let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let m = evaluate_predictions(&pred, &truth, c).unwrap();
            let (bacc, acc, acc_star, f1) = oracle(&pred, &truth, c);
            prop_assert!((m.bacc - bacc).abs() <= 1e-12);
            prop_assert!((m.acc - acc).abs() <= 1e-12);
            prop_assert!((m.acc_star - acc_star).abs() <= 1e-12);
            prop_assert!((m.macro_f1 - f1).abs() <= 1e-12);
            for v in m.recall.iter().chain(&m.f1).chain(&m.binary_accuracy) {
                prop_assert!((0.0..=1.0).contains(v));
            }
        }

        #[test]
        fn class_relabeling_invariance((c, pairs) in instance(), shift in 1usize..10) {
            let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let relabel = |v: &[usize]| v.iter().map(|x| (x + shift) % c).collect::<Vec<_>>();
            let a = evaluate_predictions(&pred, &truth, c).unwrap();
            let b = evaluate_predictions(&relabel(&pred), &relabel(&truth), c).unwrap();
            prop_assert!((a.bacc - b.bacc).abs() <= 1e-12);
            prop_assert!((a.acc - b.acc).abs() <= 1e-12);
            prop_assert!((a.acc_star - b.acc_star).abs() <= 1e-12);
            prop_assert!((a.macro_f1 - b.macro_f1).abs() <= 1e-12);
        }

        #[test]
        fn constant_predictor_bacc(c in 2usize..=10, j in 0usize..10, truth in prop::collection::vec(0usize..10, 1..200)) {
            let j = j % c;
            // every class present so each recall is defined
            let mut truth: Vec<usize> = truth.into_iter().map(|t| t % c).collect();
            truth.extend(0..c);
            let pred = vec![j; truth.len()];
            let m = evaluate_predictions(&pred, &truth, c).unwrap();
            prop_assert_eq!(m.bacc, 1.0 / c as f64);
        }
    }
}
