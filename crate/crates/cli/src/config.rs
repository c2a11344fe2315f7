//! Experiment configuration: one TOML file with an explicit schema version.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tradelab::env::EnvConfig;
use tradelab::market_data::{split_sizes, CsvSchema, FeatureRecipe};
use tradelab::nn::{Activation, AdamConfig};
use tradelab::normalization::StaticNormKind;
use tradelab::rl::RlTrainConfig;
use tradelab::sentiment::{FusionMode, DEFAULT_STALENESS_CAP_MINUTES};
use tradelab::supervised::{LabelConfig, OkdConfig, TrainConfig};

use crate::error::CliError;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    /// Root of every random stream in the run.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub data: DataConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default)]
    pub normalization: NormalizationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    pub training: TrainingConfig,
    /// Environment and reward settings; `window_len` follows `features.window`.
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub backtest: BacktestConfig,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub candles: PathBuf,
    #[serde(default = "default_asset")]
    pub asset_id: String,
    /// Seconds per candle; inferred from the data when absent.
    pub frequency: Option<i64>,
    #[serde(default)]
    pub schema: CsvSchema,
    pub sentiment: Option<PathBuf>,
    /// Train, validation and test fractions, in chronological order.
    #[serde(default = "default_split")]
    pub split: [f64; 3],
}

fn default_asset() -> String {
    "ASSET".into()
}

fn default_split() -> [f64; 3] {
    [0.7, 0.15, 0.15]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureConfig {
    pub recipe: FeatureRecipe,
    pub window: usize,
    pub stride: usize,
    pub fusion: FusionMode,
    pub staleness_cap_minutes: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            recipe: FeatureRecipe::default(),
            window: 32,
            stride: 1,
            fusion: FusionMode::PriceOnly,
            staleness_cap_minutes: DEFAULT_STALENESS_CAP_MINUTES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    #[default]
    ZscoreDataset,
    MinmaxDataset,
    SampleAverage,
    SampleStandardization,
    InstanceNormalization,
    Adaptive,
}

impl NormKind {
    pub fn as_static(self) -> Option<StaticNormKind> {
        match self {
            NormKind::ZscoreDataset => Some(StaticNormKind::ZscoreDataset),
            NormKind::MinmaxDataset => Some(StaticNormKind::MinmaxDataset),
            NormKind::SampleAverage => Some(StaticNormKind::SampleAverage),
            NormKind::SampleStandardization => Some(StaticNormKind::SampleStandardization),
            NormKind::InstanceNormalization => Some(StaticNormKind::InstanceNormalization),
            NormKind::None | NormKind::Adaptive => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NormalizationConfig {
    pub kind: NormKind,
    /// Adaptive layer only.
    pub use_gate: bool,
}

impl Default for NormalizationConfig {
    fn default() -> Self {
        NormalizationConfig {
            kind: NormKind::ZscoreDataset,
            use_gate: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Supervised,
    Okd,
    Ppo,
    Ddqn,
    Distill,
}

impl Mode {
    pub fn is_rl(self) -> bool {
        matches!(self, Mode::Ppo | Mode::Ddqn | Mode::Distill)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub mode: Mode,
    #[serde(default = "default_labels")]
    pub labels: LabelConfig,
    #[serde(default)]
    pub supervised: TrainConfig,
    #[serde(default)]
    pub okd: OkdConfig,
    #[serde(default)]
    pub rl: RlTrainConfig,
    #[serde(default)]
    pub distill: DistillConfig,
    /// Scale rewards by the training-split return std unless `env.reward_scale` is set.
    #[serde(default = "default_true")]
    pub normalize_rewards: bool,
}

fn default_labels() -> LabelConfig {
    LabelConfig { c_thres: 0.0 }
}

fn default_true() -> bool {
    true
}

/// Teacher pool over contiguous chunks of the training split, then a
/// student fitted to the pool's softened actions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub teachers: usize,
    pub temperature: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for DistillConfig {
    fn default() -> Self {
        DistillConfig {
            teachers: 3,
            temperature: 2.0,
            epochs: 20,
            batch_size: 64,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestConfig {
    pub risk_free: f64,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        BacktestConfig { risk_free: 0.0 }
    }
}

impl ExperimentConfig {
    /// Parses, resolves relative paths against `base_dir` and validates.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self, CliError> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| CliError::Config(vec![e.to_string()]))?;
        let env_window = raw
            .get("env")
            .and_then(|e| e.as_table())
            .is_some_and(|e| e.contains_key("window_len"));
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| CliError::Config(vec![e.message().to_string()]))?;
        let mut problems = Vec::new();
        if env_window && cfg.env.window_len != cfg.features.window {
            problems.push(format!(
                "env.window_len ({}) differs from features.window ({}); set features.window only",
                cfg.env.window_len, cfg.features.window
            ));
        }
        cfg.env.window_len = cfg.features.window;
        cfg.resolve_paths(base_dir);
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(CliError::Config(problems))
        }
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        ExperimentConfig::from_toml(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let absolute = |p: &Path| {
            let joined = if p.is_absolute() { p.to_path_buf() } else { base.join(p) };
            std::path::absolute(&joined).unwrap_or(joined)
        };
        self.data.candles = absolute(&self.data.candles);
        self.data.sentiment = self.data.sentiment.as_deref().map(absolute);
        self.output_dir = absolute(&self.output_dir);
    }

    /// Every validation failure, so one run reports them all.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let mut push = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        push(
            self.schema_version == SCHEMA_VERSION,
            format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version),
        );
        push(
            self.data.candles.is_file(),
            format!("data.candles: {} does not exist", self.data.candles.display()),
        );
        if let Some(p) = &self.data.sentiment {
            push(p.is_file(), format!("data.sentiment: {} does not exist", p.display()));
        }
        push(
            self.data.frequency.is_none_or(|f| f > 0),
            "data.frequency must be positive".into(),
        );
        let [a, b, c] = self.data.split;
        if let Err(e) = split_sizes(1_000_000, (a, b, c)) {
            out.push(format!("data.split: {e}"));
        }
        let mut push = |ok: bool, msg: String| {
            if !ok {
                out.push(msg);
            }
        };
        push(!self.features.recipe.0.is_empty(), "features.recipe must list at least one feature".into());
        push(self.features.window >= 1, "features.window must be at least 1".into());
        push(self.features.stride >= 1, "features.stride must be at least 1".into());
        push(
            self.features.staleness_cap_minutes > 0.0,
            "features.staleness_cap_minutes must be positive".into(),
        );
        push(
            self.features.fusion == FusionMode::PriceOnly || self.data.sentiment.is_some(),
            format!("features.fusion = {:?} needs data.sentiment", self.features.fusion),
        );
        push(!self.model.hidden.is_empty(), "model.hidden must list at least one layer".into());
        push(self.model.hidden.iter().all(|&h| h > 0), "model.hidden sizes must be positive".into());
        let mode = self.training.mode;
        push(
            !mode.is_rl()
                || matches!(
                    self.normalization.kind,
                    NormKind::None | NormKind::ZscoreDataset | NormKind::Adaptive
                ),
            format!(
                "normalization.kind = {:?} is per-window and not available for {mode:?}; use none, zscore_dataset or adaptive",
                self.normalization.kind
            ),
        );
        push(
            self.training.labels.c_thres >= 0.0,
            "training.labels.c_thres must be non-negative".into(),
        );
        let t = &self.training;
        let checks: [(&str, Result<(), tradelab::Error>); 4] = [
            ("training.supervised", t.supervised.validate()),
            ("training.okd", t.okd.validate()),
            ("training.rl", t.rl.validate()),
            ("env", self.env.validate()),
        ];
        for (name, r) in checks {
            if let Err(e) = r {
                out.push(format!("{name}: {e}"));
            }
        }
        let d = &t.distill;
        if d.teachers == 0 || d.batch_size == 0 {
            out.push("training.distill: teachers and batch_size must be at least 1".into());
        }
        if !(d.temperature > 0.0) {
            out.push("training.distill.temperature must be positive".into());
        }
        out
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(vec![format!("cannot serialize config: {e}")]))
    }

    pub fn split(&self) -> (f64, f64, f64) {
        let [a, b, c] = self.data.split;
        (a, b, c)
    }
}
