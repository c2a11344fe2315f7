//! Loading, fusing, splitting and normalizing the configured data.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use tradelab::env::{EnvConfig, TradingEnv};
use tradelab::market_data::{
    compute_returns, feature_matrix, frame_windows, load_candles, split_sizes, CandleSeries,
    FeatureWindow, Splits,
};
use tradelab::normalization::{static_normalize, DatasetStats};
use tradelab::sentiment::{aggregate, fuse_matrix, load_sentiment, AggregationReport};
use tradelab::supervised::{make_labels, LabeledWindows};

use crate::config::{ExperimentConfig, NormKind};
use crate::error::{CliError, Context};

/// One chronological partition: candles and their feature rows.
#[derive(Debug, Clone)]
pub struct Part {
    pub series: CandleSeries,
    pub features: Array2<f64>,
}

impl Part {
    pub fn first_timestamp(&self) -> Option<i64> {
        self.series.candles().first().map(|c| c.timestamp)
    }

    pub fn last_timestamp(&self) -> Option<i64> {
        self.series.candles().last().map(|c| c.timestamp)
    }
}

#[derive(Debug)]
pub struct Dataset {
    pub series: CandleSeries,
    pub feature_cols: usize,
    pub sentiment: Option<SentimentCoverage>,
    pub splits: Splits<Part>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SentimentCoverage {
    pub records: usize,
    pub first_timestamp: Option<i64>,
    pub last_timestamp: Option<i64>,
    pub report: AggregationReport,
    pub slots_with_documents: usize,
}

pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset, CliError> {
    let data = &cfg.data;
    let series = load_candles(&data.candles, &data.schema, &data.asset_id, data.frequency)
        .context(|| format!("loading candles from {}", data.candles.display()))?;
    let price = feature_matrix(&series, &cfg.features.recipe);
    let (features, sentiment) = match &data.sentiment {
        Some(path) => {
            let records = load_sentiment(path).context(|| format!("loading sentiment from {}", path.display()))?;
            let (slots, report) = aggregate(&records, &series, cfg.features.staleness_cap_minutes)
                .context(|| "aggregating sentiment".into())?;
            let fused = fuse_matrix(price.view(), &series.timestamps(), &slots, cfg.features.fusion)
                .context(|| "fusing sentiment".into())?;
            let coverage = SentimentCoverage {
                records: records.len(),
                first_timestamp: records.iter().map(|r| r.timestamp).min(),
                last_timestamp: records.iter().map(|r| r.timestamp).max(),
                report,
                slots_with_documents: slots.slots.iter().filter(|s| s.count > 0).count(),
            };
            (fused, Some(coverage))
        }
        None => (price, None),
    };
    let (n_train, n_val, _) = split_sizes(series.len(), cfg.split()).context(|| "splitting data".into())?;
    let part = |a: usize, b: usize| Part {
        series: series.slice(a, b),
        features: features.slice(s![a..b, ..]).to_owned(),
    };
    let splits = Splits::new(
        part(0, n_train),
        part(n_train, n_train + n_val),
        part(n_train + n_val, series.len()),
    );
    Ok(Dataset {
        feature_cols: features.ncols(),
        series,
        sentiment,
        splits,
    })
}

/// Normalization fitted on the training partition only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub kind: NormKind,
    pub stats: Option<DatasetStats>,
}

impl Normalizer {
    pub fn fit(kind: NormKind, train: &Part) -> Result<Self, CliError> {
        let stats = match kind.as_static() {
            Some(k) if k.needs_dataset_stats() => Some(
                DatasetStats::fit_matrix(train.features.view()).context(|| "fitting normalization statistics".into())?,
            ),
            _ => None,
        };
        Ok(Normalizer { kind, stats })
    }

    pub fn window(&self, w: &FeatureWindow) -> Result<FeatureWindow, CliError> {
        match self.kind.as_static() {
            Some(k) => static_normalize(w, k, self.stats.as_ref()).context(|| "normalizing window".into()),
            None => Ok(w.clone()),
        }
    }

    /// Whole-matrix form for environments; only dataset z-scoring applies.
    pub fn matrix(&self, features: &Array2<f64>) -> Result<Array2<f64>, CliError> {
        match (self.kind, &self.stats) {
            (NormKind::ZscoreDataset, Some(stats)) => {
                stats.zscore(features.view()).context(|| "normalizing features".into())
            }
            (NormKind::None | NormKind::Adaptive, _) => Ok(features.clone()),
            (kind, _) => Err(CliError::Config(vec![format!(
                "normalization {kind:?} cannot be applied to environment features"
            )])),
        }
    }
}

pub fn labeled_windows(cfg: &ExperimentConfig, part: &Part, norm: &Normalizer) -> Result<LabeledWindows, CliError> {
    let windows = frame_windows(&part.series, part.features.view(), cfg.features.window, cfg.features.stride)
        .context(|| "framing windows".into())?;
    let windows = windows.iter().map(|w| norm.window(w)).collect::<Result<Vec<_>, _>>()?;
    let labels = make_labels(&part.series, &cfg.training.labels).context(|| "labelling".into())?;
    LabeledWindows::from_label_set(windows, &labels).context(|| "pairing windows with labels".into())
}

/// Population std of the close-to-close returns, used to scale rewards.
pub fn return_std(part: &Part) -> Result<f64, CliError> {
    let r = compute_returns(&part.series).context(|| "computing returns".into())?.values;
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    Ok((r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

pub fn env_config(cfg: &ExperimentConfig, train: &Part) -> Result<EnvConfig, CliError> {
    let mut env = cfg.env.clone();
    if cfg.training.normalize_rewards && env.reward_scale.is_none() {
        let sd = return_std(train)?;
        if sd > 0.0 {
            env.reward_scale = Some(sd);
        }
    }
    Ok(env)
}

pub fn make_env(part: &Part, norm: &Normalizer, env: &EnvConfig) -> Result<TradingEnv, CliError> {
    TradingEnv::new(&part.series, norm.matrix(&part.features)?, env.clone()).context(|| "building environment".into())
}
