//! Per-document sentiment scores, aggregation onto the candle grid and fusion
//! with price feature windows.

use std::fs::File;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market_data::{CandleSeries, FeatureWindow};

/// Staleness feature saturates at this many minutes.
pub const DEFAULT_STALENESS_CAP_MINUTES: f64 = 60.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentimentRecord {
    pub timestamp: i64,
    /// Positive-class probability.
    pub positive: f64,
    /// Negative-class probability.
    pub negative: f64,
    pub source: String,
}

impl SentimentRecord {
    pub fn validate(&self) -> std::result::Result<(), String> {
        for (name, v) in [("positive", self.positive), ("negative", self.negative)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} score {v} outside [0, 1]"));
            }
        }
        if self.positive + self.negative > 1.0 + 1e-9 {
            return Err(format!(
                "positive + negative = {} exceeds 1",
                self.positive + self.negative
            ));
        }
        Ok(())
    }

    /// Document score `positive - negative`, in `[-1, 1]`.
    pub fn score(&self) -> Result<f64> {
        self.validate().map_err(Error::Domain)?;
        Ok(self.positive - self.negative)
    }
}

/// Loads a sentiment CSV with header `timestamp,positive,negative,source`.
pub fn load_sentiment(path: impl AsRef<Path>) -> Result<Vec<SentimentRecord>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let mut out = Vec::new();
    for record in reader.deserialize::<SentimentRecord>() {
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        record.validate().map_err(|message| Error::Validation {
            row: out.len() + 2,
            message,
        })?;
        out.push(record);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SentimentSlot {
    pub timestamp: i64,
    /// Mean document score in the slot; 0 when the slot is empty.
    pub score: f64,
    pub count: usize,
    /// Minutes since the most recent non-empty slot, capped.
    pub staleness_minutes: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SentimentSeries {
    pub slots: Vec<SentimentSlot>,
    pub frequency: i64,
}

impl SentimentSeries {
    pub fn slot_at(&self, timestamp: i64) -> Option<&SentimentSlot> {
        self.slots
            .binary_search_by_key(&timestamp, |s| s.timestamp)
            .ok()
            .map(|i| &self.slots[i])
    }
}

/// Records that could not be placed on the grid.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct AggregationReport {
    pub total: usize,
    pub before_first_slot: usize,
    pub after_last_slot: usize,
    /// Records landing in a timestamp gap between non-adjacent grid slots.
    pub in_gaps: usize,
}

impl AggregationReport {
    pub fn out_of_range(&self) -> usize {
        self.before_first_slot + self.after_last_slot + self.in_gaps
    }
}

/// Averages document scores into half-open slots `[ts, ts + frequency)`
/// of the candle grid.
pub fn aggregate(
    records: &[SentimentRecord],
    grid: &CandleSeries,
    staleness_cap_minutes: f64,
) -> Result<(SentimentSeries, AggregationReport)> {
    if grid.is_empty() {
        return Err(Error::Empty("sentiment grid".into()));
    }
    let timestamps = grid.timestamps();
    let frequency = grid.frequency();
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); timestamps.len()];
    let mut report = AggregationReport {
        total: records.len(),
        ..Default::default()
    };
    for record in records {
        let score = record.score()?;
        let ts = record.timestamp;
        let last = *timestamps.last().expect("non-empty grid");
        if ts < timestamps[0] {
            report.before_first_slot += 1;
            continue;
        }
        if ts >= last + frequency {
            report.after_last_slot += 1;
            continue;
        }
        // last slot start <= ts
        let slot = timestamps.partition_point(|&t| t <= ts) - 1;
        if ts < timestamps[slot] + frequency {
            buckets[slot].push(score);
        } else {
            report.in_gaps += 1;
        }
    }

    let mut slots = Vec::with_capacity(timestamps.len());
    let mut last_seen: Option<i64> = None;
    for (ts, mut scores) in timestamps.into_iter().zip(buckets) {
        // Summation in sorted order makes the mean independent of record order.
        scores.sort_by(f64::total_cmp);
        let count = scores.len();
        let score = if count == 0 {
            0.0
        } else {
            scores.iter().sum::<f64>() / count as f64
        };
        if count > 0 {
            last_seen = Some(ts);
        }
        let staleness_minutes = match last_seen {
            Some(seen) => ((ts - seen) as f64 / 60.0).min(staleness_cap_minutes),
            None => staleness_cap_minutes,
        };
        slots.push(SentimentSlot {
            timestamp: ts,
            score,
            count,
            staleness_minutes,
        });
    }
    Ok((SentimentSeries { slots, frequency }, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    #[default]
    PriceOnly,
    SentimentOnly,
    Both,
}

impl FusionMode {
    /// Column count after fusing with `price_cols` price features.
    pub fn width(self, price_cols: usize) -> usize {
        match self {
            FusionMode::PriceOnly => price_cols,
            FusionMode::SentimentOnly => 2,
            FusionMode::Both => price_cols + 2,
        }
    }
}

/// Appends (or substitutes) the sentiment score and staleness columns for
/// each feature row, looked up by the row's timestamp.
pub fn fuse_matrix(
    features: ArrayView2<f64>,
    timestamps: &[i64],
    sentiment: &SentimentSeries,
    mode: FusionMode,
) -> Result<Array2<f64>> {
    if timestamps.len() != features.nrows() {
        return Err(Error::Shape(format!(
            "{} timestamps for {} feature rows",
            timestamps.len(),
            features.nrows()
        )));
    }
    if mode == FusionMode::PriceOnly {
        return Ok(features.to_owned());
    }
    let price_cols = if mode == FusionMode::Both { features.ncols() } else { 0 };
    let mut matrix = Array2::zeros((features.nrows(), price_cols + 2));
    for (r, &ts) in timestamps.iter().enumerate() {
        let slot = sentiment.slot_at(ts).ok_or(Error::Coverage(ts))?;
        for c in 0..price_cols {
            matrix[[r, c]] = features[[r, c]];
        }
        matrix[[r, price_cols]] = slot.score;
        matrix[[r, price_cols + 1]] = slot.staleness_minutes;
    }
    Ok(matrix)
}

/// [`fuse_matrix`] applied to each window.
pub fn fuse(
    windows: &[FeatureWindow],
    sentiment: &SentimentSeries,
    mode: FusionMode,
) -> Result<Vec<FeatureWindow>> {
    windows
        .iter()
        .map(|w| {
            Ok(FeatureWindow {
                matrix: fuse_matrix(w.matrix.view(), &w.timestamps, sentiment, mode)?,
                timestamps: w.timestamps.clone(),
                end_timestamp: w.end_timestamp,
                target_index: w.target_index,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{make_windows, Candle, FeatureRecipe};
    use proptest::prelude::*;

    fn rec(ts: i64, p: f64, n: f64) -> SentimentRecord {
        SentimentRecord {
            timestamp: ts,
            positive: p,
            negative: n,
            source: "news".into(),
        }
    }

    fn grid(n: usize) -> CandleSeries {
        let candles = (0..n)
            .map(|i| Candle {
                timestamp: 60 * i as i64,
                open: 100.0,
                high: 101.0,
                low: 99.0,
                close: 100.0 + i as f64,
                volume: 1.0,
            })
            .map(|mut c| {
                c.high = c.high.max(c.close);
                c
            })
            .collect();
        CandleSeries::new("G", 60, candles).unwrap()
    }

    #[test]
    fn score_examples() {
        approx::assert_abs_diff_eq!(rec(0, 0.7, 0.1).score().unwrap(), 0.6, epsilon = 1e-15);
        assert_eq!(rec(0, 0.0, 0.0).score().unwrap(), 0.0);
        assert_eq!(rec(0, 0.0, 1.0).score().unwrap(), -1.0);
        assert!(rec(0, 0.8, 0.5).score().is_err());
        assert!(rec(0, -0.1, 0.5).score().is_err());
    }

    #[test]
    fn aggregation_examples() {
        let g = grid(3);
        // 0.7 - 0.1 = 0.6 and 0.1 - 0.3 = -0.2 in slot 1
        let (s, report) =
            aggregate(&[rec(60, 0.7, 0.1), rec(119, 0.1, 0.3)], &g, 60.0).unwrap();
        approx::assert_abs_diff_eq!(s.slots[1].score, 0.2, epsilon = 1e-12);
        assert_eq!(s.slots[1].count, 2);
        assert_eq!((s.slots[0].score, s.slots[0].count), (0.0, 0));
        assert_eq!(report.out_of_range(), 0);

        let (s, _) = aggregate(&[rec(120, 0.7, 0.1)], &g, 60.0).unwrap();
        assert_eq!(s.slots[2].count, 1);
        approx::assert_abs_diff_eq!(s.slots[2].score, 0.6, epsilon = 1e-15);
    }

    #[test]
    fn out_of_range_records_reported() {
        let g = grid(3);
        let records = [rec(-1, 0.5, 0.1), rec(180, 0.5, 0.1), rec(0, 0.5, 0.1)];
        let (s, report) = aggregate(&records, &g, 60.0).unwrap();
        assert_eq!(report.before_first_slot, 1);
        assert_eq!(report.after_last_slot, 1);
        let placed: usize = s.slots.iter().map(|s| s.count).sum();
        assert_eq!(placed + report.out_of_range(), records.len());
    }

    #[test]
    fn staleness_tracks_minutes_since_last_document() {
        let (s, _) = aggregate(&[rec(60, 0.5, 0.1)], &grid(4), 1.5).unwrap();
        let st: Vec<f64> = s.slots.iter().map(|s| s.staleness_minutes).collect();
        assert_eq!(st, vec![1.5, 0.0, 1.0, 1.5]);
    }

    #[test]
    fn fusion_modes() {
        let g = grid(8);
        let w = make_windows(&g, 4, 1, &FeatureRecipe::default()).unwrap();
        let (s, _) = aggregate(&[rec(60, 0.5, 0.1)], &g, 60.0).unwrap();
        assert_eq!(fuse(&w, &s, FusionMode::PriceOnly).unwrap(), w);
        let both = fuse(&w, &s, FusionMode::Both).unwrap();
        assert!(both.iter().all(|w| w.cols() == 6));
        assert_eq!(both[0].matrix[[1, 4]], s.slots[1].score);
        assert_eq!(both[0].matrix[[1, 0]], w[0].matrix[[1, 0]]);
        let only = fuse(&w, &s, FusionMode::SentimentOnly).unwrap();
        assert!(only.iter().all(|w| w.cols() == 2));

        let (short, _) = aggregate(&[], &grid(5), 60.0).unwrap();
        assert!(matches!(
            fuse(&w, &short, FusionMode::Both).unwrap_err(),
            Error::Coverage(300)
        ));
    }

    fn arb_record() -> impl Strategy<Value = SentimentRecord> {
        (-100i64..400, 0.0..1.0f64, 0.0..1.0f64).prop_map(|(ts, a, b)| {
            let p = a;
            let n = b * (1.0 - a);
            rec(ts, p, n)
        })
    }

    proptest! {
        #[test]
        fn score_antisymmetric(a in 0.0..1.0f64, b in 0.0..1.0f64) {
            let n = b * (1.0 - a);
            prop_assert_eq!(rec(0, a, n).score().unwrap(), -rec(0, n, a).score().unwrap());
        }

        #[test]
        fn aggregation_permutation_invariant_and_conserving(
            records in proptest::collection::vec(arb_record(), 0..40),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let g = grid(5);
            let (a, report) = aggregate(&records, &g, 60.0).unwrap();
            let mut shuffled = records.clone();
            shuffled.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let (b, _) = aggregate(&shuffled, &g, 60.0).unwrap();
            prop_assert_eq!(&a, &b);
            let placed: usize = a.slots.iter().map(|s| s.count).sum();
            prop_assert_eq!(placed + report.out_of_range(), records.len());
        }
    }
}
