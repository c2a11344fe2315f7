//! Trend labels, supervised training and online knowledge distillation.

mod metrics;
mod okd;
mod training;

pub use metrics::{argmax, classification_metrics, confusion_matrix, ClassifierMetrics};
pub use okd::{
    init_okd_networks, okd_step, soft_labels, train_okd, OkdConfig, OkdOutcome, OkdStepOutput, SelfDistillation,
};
pub use training::{
    evaluate_classifier, evaluate_split, metrics_csv, predict_logits, train_baseline, EpochMetrics, TrainConfig,
    TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::backtest::Position;
use crate::error::{Error, Result};
use crate::market_data::{CandleSeries, FeatureWindow};

/// Trend class of the next step. Class indices follow [`Position::index`]:
/// short = 0, exit = 1, long = 2.
pub type TrendLabel = Position;

pub const NUM_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelConfig {
    /// Fractional price change needed to call a move long or short.
    pub c_thres: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSet {
    /// `labels[t]` describes the move from candle `t` to `t + 1`.
    pub labels: Vec<TrendLabel>,
    /// Counts in class-index order (short, exit, long).
    pub counts: [usize; NUM_CLASSES],
}

pub fn label_for_change(change: f64, c_thres: f64) -> TrendLabel {
    if change > c_thres {
        Position::Long
    } else if change < -c_thres {
        Position::Short
    } else {
        Position::Flat
    }
}

pub fn make_labels(series: &CandleSeries, config: &LabelConfig) -> Result<LabelSet> {
    if !(config.c_thres >= 0.0) {
        return Err(Error::Config(format!(
            "c_thres must be non-negative, got {}",
            config.c_thres
        )));
    }
    if series.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: series.len(),
            context: "labels need a next price".into(),
        });
    }
    let labels: Vec<TrendLabel> = series
        .candles()
        .windows(2)
        .map(|w| label_for_change(w[1].close / w[0].close - 1.0, config.c_thres))
        .collect();
    let mut counts = [0; NUM_CLASSES];
    for l in &labels {
        counts[l.index()] += 1;
    }
    Ok(LabelSet { labels, counts })
}

/// Windows paired with the label of the step each one predicts.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledWindows {
    pub windows: Vec<FeatureWindow>,
    pub labels: Vec<TrendLabel>,
}

impl LabeledWindows {
    pub fn new(windows: Vec<FeatureWindow>, labels: Vec<TrendLabel>) -> Result<Self> {
        if windows.len() != labels.len() {
            return Err(Error::Shape(format!(
                "{} windows but {} labels",
                windows.len(),
                labels.len()
            )));
        }
        Ok(LabeledWindows { windows, labels })
    }

    /// Picks `labels[target_index - 1]` for each window: the move from the
    /// window's last candle to its target.
    pub fn from_label_set(windows: Vec<FeatureWindow>, set: &LabelSet) -> Result<Self> {
        let labels = windows
            .iter()
            .map(|w| {
                set.labels.get(w.end_index()).copied().ok_or_else(|| {
                    Error::Shape(format!("no label for target index {}", w.target_index))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(LabeledWindows { windows, labels })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn classes(&self) -> Vec<usize> {
        self.labels.iter().map(|l| l.index()).collect()
    }
}

pub(crate) fn one_hot(class: usize) -> [f64; NUM_CLASSES] {
    let mut v = [0.0; NUM_CLASSES];
    v[class] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::Candle;
    use proptest::prelude::*;

    fn series(closes: &[f64]) -> CandleSeries {
        let candles = closes
            .iter()
            .enumerate()
            .map(|(i, &c)| Candle {
                timestamp: 60 * i as i64,
                open: c,
                high: c,
                low: c,
                close: c,
                volume: 0.0,
            })
            .collect();
        CandleSeries::new("T", 60, candles).unwrap()
    }

    #[test]
    fn label_examples() {
        let cfg = LabelConfig { c_thres: 0.005 };
        assert_eq!(make_labels(&series(&[100.0, 101.0]), &cfg).unwrap().labels, vec![Position::Long]);
        assert_eq!(make_labels(&series(&[100.0, 100.0]), &cfg).unwrap().labels, vec![Position::Flat]);
        assert_eq!(make_labels(&series(&[100.0, 99.4]), &cfg).unwrap().labels, vec![Position::Short]);
        let set = make_labels(&series(&[100.0, 101.0, 101.0, 99.0]), &cfg).unwrap();
        assert_eq!(set.counts, [1, 1, 1]);
        assert!(make_labels(&series(&[100.0]), &cfg).is_err());
    }

    proptest! {
        #[test]
        fn zero_threshold_flat_only_when_unchanged(a in 1.0..200.0f64, b in 1.0..200.0f64) {
            let l = make_labels(&series(&[a, b]), &LabelConfig { c_thres: 0.0 }).unwrap().labels[0];
            prop_assert_eq!(l == Position::Flat, b / a - 1.0 == 0.0);
        }

        #[test]
        fn raising_threshold_is_monotone(change in -0.05..0.05f64, lo in 0.0..0.02f64, extra in 0.0..0.02f64) {
            let a = label_for_change(change, lo);
            let b = label_for_change(change, lo + extra);
            if a == Position::Flat {
                prop_assert_eq!(b, Position::Flat);
            }
            prop_assert!(b == a || b == Position::Flat);
        }
    }
}
