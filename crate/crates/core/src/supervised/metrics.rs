use serde::Serialize;

use crate::error::{Error, Result};

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// `confusion[truth][predicted]` counts.
pub fn confusion_matrix(predicted: &[usize], truth: &[usize], classes: usize) -> Result<Vec<Vec<u64>>> {
    if predicted.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            predicted.len(),
            truth.len()
        )));
    }
    let mut m = vec![vec![0u64; classes]; classes];
    for (&p, &t) in predicted.iter().zip(truth) {
        if p >= classes || t >= classes {
            return Err(Error::Domain(format!("class index outside 0..{classes}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub kappa: f64,
    pub confusion: Vec<Vec<u64>>,
}

impl ClassifierMetrics {
    pub fn from_confusion(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let classes = confusion.len();
        let n: u64 = confusion.iter().flatten().sum();
        if n == 0 {
            return Err(Error::Empty("evaluation set".into()));
        }
        let agree: u64 = (0..classes).map(|k| confusion[k][k]).sum();
        let row = |k: usize| -> u64 { confusion[k].iter().sum() };
        let col = |k: usize| -> u64 { confusion.iter().map(|r| r[k]).sum() };

        // kappa = (p_o - p_e) / (1 - p_e) scaled by n^2 and kept in integers
        let chance: i128 = (0..classes).map(|k| i128::from(row(k)) * i128::from(col(k))).sum();
        let n = i128::from(n);
        let num = n * i128::from(agree) - chance;
        let den = n * n - chance;
        let kappa = if den == 0 { 1.0 } else { num as f64 / den as f64 };

        let mut f1_sum = 0.0;
        let mut present = 0usize;
        for k in 0..classes {
            let tp = confusion[k][k];
            let fp = col(k) - tp;
            let fn_ = row(k) - tp;
            let denom = 2 * tp + fp + fn_;
            if denom > 0 {
                f1_sum += (2 * tp) as f64 / denom as f64;
                present += 1;
            }
        }
        Ok(ClassifierMetrics {
            accuracy: agree as f64 / n as f64,
            macro_f1: f1_sum / present as f64,
            kappa,
            confusion,
        })
    }
}

/// Accuracy, macro F1 over classes that occur in either vector, and Cohen's kappa.
pub fn classification_metrics(predicted: &[usize], truth: &[usize], classes: usize) -> Result<ClassifierMetrics> {
    ClassifierMetrics::from_confusion(confusion_matrix(predicted, truth, classes)?)
}
