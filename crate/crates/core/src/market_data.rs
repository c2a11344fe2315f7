//! Candle ingestion, returns, sliding feature windows and chronological splits.
//!
//! Everything here is a pure function over immutable series. Feature rows at
//! index `t` only read candles `t` and `t - 1`, so a window ending at `t`
//! never sees data past its end timestamp.

use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Mutex;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Windows spanning a timestamp gap wider than this many candle periods are dropped.
pub const MAX_GAP_PERIODS: i64 = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Candle {
    pub timestamp: i64,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub volume: f64,
}

impl Candle {
    pub fn validate(&self) -> std::result::Result<(), String> {
        let prices = [self.open, self.high, self.low, self.close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err("prices must be finite and strictly positive".into());
        }
        if !self.volume.is_finite() || self.volume < 0.0 {
            return Err(format!("volume must be non-negative, got {}", self.volume));
        }
        if self.high < self.low {
            return Err(format!("high {} < low {}", self.high, self.low));
        }
        if self.low > self.open.min(self.close) {
            return Err(format!(
                "low {} exceeds min(open, close) {}",
                self.low,
                self.open.min(self.close)
            ));
        }
        if self.high < self.open.max(self.close) {
            return Err(format!(
                "high {} is below max(open, close) {}",
                self.high,
                self.open.max(self.close)
            ));
        }
        Ok(())
    }
}

/// A gap between consecutive candles wider than the series frequency.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Gap {
    /// Index of the candle after the gap.
    pub index: usize,
    pub spacing: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandleSeries {
    asset_id: String,
    frequency: i64,
    candles: Vec<Candle>,
}

impl CandleSeries {
    /// Validates every candle and the timestamp ordering. Spacing must be a
    /// whole number of periods; anything wider than one period is a gap.
    pub fn new(asset_id: impl Into<String>, frequency: i64, candles: Vec<Candle>) -> Result<Self> {
        if frequency <= 0 {
            return Err(Error::Config(format!(
                "frequency must be positive, got {frequency}"
            )));
        }
        for (i, c) in candles.iter().enumerate() {
            c.validate()
                .map_err(|message| Error::Validation { row: i, message })?;
        }
        for (i, pair) in candles.windows(2).enumerate() {
            let (prev, cur) = (pair[0].timestamp, pair[1].timestamp);
            if cur == prev {
                return Err(Error::DuplicateTimestamp {
                    row: i + 1,
                    timestamp: cur,
                });
            }
            if cur < prev {
                return Err(Error::Ordering {
                    row: i + 1,
                    timestamp: cur,
                    previous: prev,
                });
            }
            if (cur - prev) % frequency != 0 {
                return Err(Error::Validation {
                    row: i + 1,
                    message: format!(
                        "spacing {} is not a multiple of the frequency {frequency}",
                        cur - prev
                    ),
                });
            }
        }
        Ok(CandleSeries {
            asset_id: asset_id.into(),
            frequency,
            candles,
        })
    }

    pub fn asset_id(&self) -> &str {
        &self.asset_id
    }

    pub fn frequency(&self) -> i64 {
        self.frequency
    }

    pub fn candles(&self) -> &[Candle] {
        &self.candles
    }

    pub fn len(&self) -> usize {
        self.candles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candles.is_empty()
    }

    pub fn closes(&self) -> Vec<f64> {
        self.candles.iter().map(|c| c.close).collect()
    }

    pub fn timestamps(&self) -> Vec<i64> {
        self.candles.iter().map(|c| c.timestamp).collect()
    }

    pub fn gaps(&self) -> Vec<Gap> {
        self.candles
            .windows(2)
            .enumerate()
            .filter_map(|(i, w)| {
                let spacing = w[1].timestamp - w[0].timestamp;
                (spacing > self.frequency).then_some(Gap {
                    index: i + 1,
                    spacing,
                })
            })
            .collect()
    }

    /// Contiguous sub-series `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> CandleSeries {
        CandleSeries {
            asset_id: self.asset_id.clone(),
            frequency: self.frequency,
            candles: self.candles[start..end].to_vec(),
        }
    }
}

/// Column names used to locate candle fields in a CSV header.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CsvSchema {
    pub timestamp: String,
    pub open: String,
    pub high: String,
    pub low: String,
    pub close: String,
    pub volume: String,
}

impl Default for CsvSchema {
    fn default() -> Self {
        CsvSchema {
            timestamp: "timestamp".into(),
            open: "open".into(),
            high: "high".into(),
            low: "low".into(),
            close: "close".into(),
            volume: "volume".into(),
        }
    }
}

impl CsvSchema {
    fn columns(&self) -> [&str; 6] {
        [
            &self.timestamp,
            &self.open,
            &self.high,
            &self.low,
            &self.close,
            &self.volume,
        ]
    }
}

/// Loads a candle CSV. When `frequency` is `None` it is inferred as the
/// smallest spacing between consecutive rows.
pub fn load_candles(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    asset_id: &str,
    frequency: Option<i64>,
) -> Result<CandleSeries> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(file);
    let headers = reader
        .headers()
        .map_err(|e| Error::Parse {
            row: 1,
            message: e.to_string(),
        })?
        .clone();
    let mut index = [0usize; 6];
    for (slot, name) in index.iter_mut().zip(schema.columns()) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Parse {
                row: 1,
                message: format!("missing column `{name}` in header"),
            })?;
    }

    let mut candles: Vec<Candle> = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let field = |k: usize| -> Result<&str> {
            record.get(index[k]).ok_or_else(|| Error::Parse {
                row,
                message: format!("missing field `{}`", schema.columns()[k]),
            })
        };
        let parse_f64 = |k: usize| -> Result<f64> {
            let raw = field(k)?;
            raw.parse::<f64>().map_err(|_| Error::Parse {
                row,
                message: format!("`{}` is not a number: {raw:?}", schema.columns()[k]),
            })
        };
        let raw_ts = field(0)?;
        let timestamp = raw_ts.parse::<i64>().map_err(|_| Error::Parse {
            row,
            message: format!("timestamp is not an integer: {raw_ts:?}"),
        })?;
        let candle = Candle {
            timestamp,
            open: parse_f64(1)?,
            high: parse_f64(2)?,
            low: parse_f64(3)?,
            close: parse_f64(4)?,
            volume: parse_f64(5)?,
        };
        candle
            .validate()
            .map_err(|message| Error::Validation { row, message })?;
        if let Some(prev) = candles.last() {
            if candle.timestamp == prev.timestamp {
                return Err(Error::DuplicateTimestamp { row, timestamp });
            }
            if candle.timestamp < prev.timestamp {
                return Err(Error::Ordering {
                    row,
                    timestamp,
                    previous: prev.timestamp,
                });
            }
        }
        candles.push(candle);
    }
    if candles.is_empty() {
        return Err(Error::Empty(format!("no candles in {}", path.display())));
    }
    let frequency = match frequency {
        Some(f) => f,
        None => candles
            .windows(2)
            .map(|w| w[1].timestamp - w[0].timestamp)
            .min()
            .unwrap_or(60),
    };
    CandleSeries::new(asset_id, frequency, candles)
}

/// Writes a series with the default header. Floats use the shortest
/// representation that parses back to the same bits.
pub fn write_candles(path: impl AsRef<Path>, series: &CandleSeries) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("timestamp,open,high,low,close,volume\n");
    for c in series.candles() {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.timestamp, c.open, c.high, c.low, c.close, c.volume
        ));
    }
    let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path, e))
}

/// Simple close-to-close returns `close_t / close_{t-1} - 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnSeries {
    pub values: Vec<f64>,
}

pub fn compute_returns(series: &CandleSeries) -> Result<ReturnSeries> {
    if series.len() < 2 {
        return Err(Error::InsufficientData {
            needed: 2,
            got: series.len(),
            context: "returns need two candles".into(),
        });
    }
    let values = series
        .candles()
        .windows(2)
        .map(|w| w[1].close / w[0].close - 1.0)
        .collect();
    Ok(ReturnSeries { values })
}

/// Per-step features derived from a candle and its predecessor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    /// Close-to-close return; 0 for the first candle of a series.
    Return,
    /// `(high - low) / close`
    Range,
    /// `(close - open) / close`
    Body,
    /// `ln(1 + volume)`
    LogVolume,
}

impl Feature {
    fn value(self, prev: Option<&Candle>, c: &Candle) -> f64 {
        match self {
            Feature::Return => prev.map_or(0.0, |p| c.close / p.close - 1.0),
            Feature::Range => (c.high - c.low) / c.close,
            Feature::Body => (c.close - c.open) / c.close,
            Feature::LogVolume => c.volume.ln_1p(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureRecipe(pub Vec<Feature>);

impl Default for FeatureRecipe {
    fn default() -> Self {
        FeatureRecipe(vec![
            Feature::Return,
            Feature::Range,
            Feature::Body,
            Feature::LogVolume,
        ])
    }
}

impl FeatureRecipe {
    pub fn width(&self) -> usize {
        self.0.len()
    }
}

/// Feature rows for the whole series: `len × recipe.width()`.
pub fn feature_matrix(series: &CandleSeries, recipe: &FeatureRecipe) -> Array2<f64> {
    let candles = series.candles();
    Array2::from_shape_fn((candles.len(), recipe.width()), |(t, k)| {
        let prev = t.checked_sub(1).map(|p| &candles[p]);
        recipe.0[k].value(prev, &candles[t])
    })
}

/// `L × d` block of consecutive feature rows. `target_index` is the first
/// step after the window, the step being predicted.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureWindow {
    pub matrix: Array2<f64>,
    /// Timestamp of each row, oldest first.
    pub timestamps: Vec<i64>,
    pub end_timestamp: i64,
    pub target_index: usize,
}

impl FeatureWindow {
    pub fn rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn cols(&self) -> usize {
        self.matrix.ncols()
    }

    /// Index of the last row in the source series.
    pub fn end_index(&self) -> usize {
        self.target_index - 1
    }
}

/// Frames windows of `window_len` rows ending at `window_len - 1`,
/// `window_len - 1 + stride`, ... with one future step reserved for the target.
pub fn make_windows(
    series: &CandleSeries,
    window_len: usize,
    stride: usize,
    recipe: &FeatureRecipe,
) -> Result<Vec<FeatureWindow>> {
    frame_windows(series, feature_matrix(series, recipe).view(), window_len, stride)
}

/// [`make_windows`] over precomputed feature rows, one per candle of `series`.
pub fn frame_windows(
    series: &CandleSeries,
    features: ArrayView2<f64>,
    window_len: usize,
    stride: usize,
) -> Result<Vec<FeatureWindow>> {
    if window_len == 0 || stride == 0 {
        return Err(Error::Config(
            "window length and stride must be at least 1".into(),
        ));
    }
    if features.nrows() != series.len() {
        return Err(Error::Shape(format!(
            "{} feature rows for {} candles",
            features.nrows(),
            series.len()
        )));
    }
    if series.len() < window_len + 1 {
        return Err(Error::InsufficientData {
            needed: window_len + 1,
            got: series.len(),
            context: format!("window of {window_len} rows plus one target step"),
        });
    }
    let timestamps = series.timestamps();
    let max_spacing = MAX_GAP_PERIODS * series.frequency();
    let mut windows = Vec::new();
    let mut end = window_len - 1;
    while end + 1 < series.len() {
        let start = end + 1 - window_len;
        let spans_gap = timestamps[start..=end + 1]
            .windows(2)
            .any(|w| w[1] - w[0] > max_spacing);
        if !spans_gap {
            windows.push(FeatureWindow {
                matrix: features.slice(ndarray::s![start..=end, ..]).to_owned(),
                timestamps: timestamps[start..=end].to_vec(),
                end_timestamp: timestamps[end],
                target_index: end + 1,
            });
        }
        end += stride;
    }
    Ok(windows)
}

/// Floor each fraction's share of `n`; the remainder goes to the test split.
pub fn split_sizes(n: usize, fractions: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (train, val, test) = fractions;
    if [train, val, test].iter().any(|f| !f.is_finite() || *f <= 0.0) {
        return Err(Error::Config(format!(
            "split fractions must be positive, got {fractions:?}"
        )));
    }
    if (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions must sum to 1, got {}",
            train + val + test
        )));
    }
    // The small offset keeps exact products such as 0.6 * 10 from flooring down.
    let n_train = (n as f64 * train + 1e-9).floor() as usize;
    let n_val = (n as f64 * val + 1e-9).floor() as usize;
    let n_test = n.saturating_sub(n_train + n_val);
    for (name, size) in [("train", n_train), ("validation", n_val), ("test", n_test)] {
        if size == 0 {
            return Err(Error::Config(format!(
                "{name} split is empty ({n} items, fractions {fractions:?})"
            )));
        }
    }
    Ok((n_train, n_val, n_test))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    Train,
    Validation,
    Test,
}

/// Three chronological partitions behind accessors that record every read,
/// so callers can prove a phase never touched the test data.
#[derive(Debug)]
pub struct Splits<T> {
    train: T,
    validation: T,
    test: T,
    log: Mutex<Vec<SplitKind>>,
}

impl<T> Splits<T> {
    pub fn new(train: T, validation: T, test: T) -> Self {
        Splits {
            train,
            validation,
            test,
            log: Mutex::new(Vec::new()),
        }
    }

    fn record(&self, kind: SplitKind) {
        self.log.lock().expect("access log poisoned").push(kind);
    }

    pub fn train(&self) -> &T {
        self.record(SplitKind::Train);
        &self.train
    }

    pub fn validation(&self) -> &T {
        self.record(SplitKind::Validation);
        &self.validation
    }

    pub fn test(&self) -> &T {
        self.record(SplitKind::Test);
        &self.test
    }

    pub fn access_log(&self) -> Vec<SplitKind> {
        self.log.lock().expect("access log poisoned").clone()
    }

    pub fn test_accessed(&self) -> bool {
        self.access_log().contains(&SplitKind::Test)
    }
}

/// Contiguous chronological split of windows ordered by end timestamp.
pub fn chronological_split(
    windows: &[FeatureWindow],
    fractions: (f64, f64, f64),
) -> Result<Splits<Vec<FeatureWindow>>> {
    if let Some(i) = windows
        .windows(2)
        .position(|w| w[1].end_timestamp <= w[0].end_timestamp)
    {
        return Err(Error::Ordering {
            row: i + 1,
            timestamp: windows[i + 1].end_timestamp,
            previous: windows[i].end_timestamp,
        });
    }
    let (n_train, n_val, _) = split_sizes(windows.len(), fractions)?;
    Ok(Splits::new(
        windows[..n_train].to_vec(),
        windows[n_train..n_train + n_val].to_vec(),
        windows[n_train + n_val..].to_vec(),
    ))
}

/// Chronological split of a candle series by candle count.
pub fn split_series(
    series: &CandleSeries,
    fractions: (f64, f64, f64),
) -> Result<Splits<CandleSeries>> {
    let (n_train, n_val, _) = split_sizes(series.len(), fractions)?;
    Ok(Splits::new(
        series.slice(0, n_train),
        series.slice(n_train, n_train + n_val),
        series.slice(n_train + n_val, series.len()),
    ))
}
