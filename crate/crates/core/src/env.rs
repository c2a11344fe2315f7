//! Episodic single-asset market simulator with shaped rewards.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backtest::Position;
use crate::error::{Error, Result};
use crate::market_data::{feature_matrix, CandleSeries, FeatureRecipe, FeatureWindow};

/// Scalars appended to every observation: position one-hot (short, flat,
/// long) and the agent-price gap relative to the trailing margin.
pub const OBS_EXTRAS: usize = 4;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    Pnl,
    PnlSmoothed,
    PnlTrailing,
    PnlSharpe,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub window_len: usize,
    pub commission: f64,
    pub reward_kind: RewardKind,
    pub smoothing_horizon: usize,
    pub trail_margin: f64,
    pub trail_weight: f64,
    pub trail_step: f64,
    pub sharpe_window: usize,
    pub sharpe_weight: f64,
    /// Divisor for the pnl and fee components, normally the training-split
    /// standard deviation of returns. `None` leaves rewards unscaled.
    pub reward_scale: Option<f64>,
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig {
            window_len: 32,
            commission: 0.0,
            reward_kind: RewardKind::Pnl,
            smoothing_horizon: 10,
            trail_margin: 0.01,
            trail_weight: 0.5,
            trail_step: 0.0005,
            sharpe_window: 64,
            sharpe_weight: 0.1,
            reward_scale: None,
        }
    }
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.window_len == 0 {
            return bad("window_len must be at least 1".into());
        }
        if !(self.commission >= 0.0) {
            return bad(format!("commission must be non-negative, got {}", self.commission));
        }
        if self.smoothing_horizon == 0 {
            return bad("smoothing_horizon must be at least 1".into());
        }
        if !(self.trail_margin > 0.0) {
            return bad(format!("trail_margin must be positive, got {}", self.trail_margin));
        }
        if !(0.0..=1.0).contains(&self.trail_weight) {
            return bad(format!("trail_weight must lie in [0, 1], got {}", self.trail_weight));
        }
        if !(self.trail_step > 0.0 && self.trail_step < 1.0) {
            return bad(format!("trail_step must lie in (0, 1), got {}", self.trail_step));
        }
        if self.sharpe_window < 2 {
            return bad("sharpe_window must be at least 2".into());
        }
        if let Some(scale) = self.reward_scale {
            if !(scale > 0.0 && scale.is_finite()) {
                return bad(format!("reward_scale must be positive, got {scale}"));
            }
        }
        Ok(())
    }

    /// Fewest candles that still give one step.
    pub fn min_len(&self) -> usize {
        match self.reward_kind {
            RewardKind::PnlSmoothed => self.window_len + self.smoothing_horizon,
            _ => self.window_len + 1,
        }
    }
}

/// Reward ingredients before scaling.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RewardComponents {
    pub pnl: f64,
    pub fee: f64,
    pub trail: f64,
    pub sharpe_adj: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    /// Index of the latest candle visible to the agent.
    pub t: usize,
    pub position: Position,
    pub agent_price: f64,
    pub observation: FeatureWindow,
    pub extras: Vec<f64>,
    pub done: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub reward: f64,
    pub components: RewardComponents,
    pub next_state: EnvState,
}

/// Rolling Sharpe ratio over the most recent `window` values; 0 while undefined.
fn rolling_sharpe(values: &[f64], window: usize) -> f64 {
    let tail = &values[values.len().saturating_sub(window)..];
    if tail.len() < 2 {
        return 0.0;
    }
    let n = tail.len() as f64;
    let mean = tail.iter().sum::<f64>() / n;
    let var = tail.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    if var > 0.0 {
        mean / var.sqrt()
    } else {
        0.0
    }
}

pub fn trailing_reward(agent_price: f64, close: f64, margin: f64) -> f64 {
    1.0 - (agent_price - close).abs() / (margin * close)
}

#[derive(Debug, Clone)]
pub struct TradingEnv {
    config: EnvConfig,
    closes: Vec<f64>,
    timestamps: Vec<i64>,
    features: Array2<f64>,
    t: usize,
    position: Position,
    agent_price: f64,
    pnl_stream: Vec<f64>,
    done: bool,
}

impl TradingEnv {
    /// `features` holds one row per candle of `series`; rows ending at `t`
    /// form the observation at step `t`.
    pub fn new(series: &CandleSeries, features: Array2<f64>, config: EnvConfig) -> Result<Self> {
        config.validate()?;
        if features.nrows() != series.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} candles",
                features.nrows(),
                series.len()
            )));
        }
        if series.len() < config.min_len() {
            return Err(Error::InsufficientData {
                needed: config.min_len(),
                got: series.len(),
                context: format!("window of {} rows plus future steps", config.window_len),
            });
        }
        let closes = series.closes();
        let t = config.window_len - 1;
        Ok(TradingEnv {
            agent_price: closes[t],
            closes,
            timestamps: series.timestamps(),
            features,
            t,
            position: Position::Flat,
            pnl_stream: Vec::new(),
            done: false,
            config,
        })
    }

    pub fn from_series(series: &CandleSeries, recipe: &FeatureRecipe, config: EnvConfig) -> Result<Self> {
        TradingEnv::new(series, feature_matrix(series, recipe), config)
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn feature_cols(&self) -> usize {
        self.features.ncols()
    }

    pub fn closes(&self) -> &[f64] {
        &self.closes
    }

    /// Steps in one full episode.
    pub fn episode_len(&self) -> usize {
        self.closes.len() - self.config.window_len
    }

    /// Close-to-close returns the agent is exposed to, in step order.
    pub fn episode_returns(&self) -> Vec<f64> {
        (self.config.window_len - 1..self.closes.len() - 1)
            .map(|t| self.closes[t + 1] / self.closes[t] - 1.0)
            .collect()
    }

    /// Feature rows visible at step `t`.
    pub fn window(&self, t: usize) -> ArrayView2<'_, f64> {
        self.features.slice(s![t + 1 - self.config.window_len..=t, ..])
    }

    pub fn reset(&mut self) -> EnvState {
        self.t = self.config.window_len - 1;
        self.position = Position::Flat;
        self.agent_price = self.closes[self.t];
        self.pnl_stream.clear();
        self.done = false;
        self.state()
    }

    pub fn state(&self) -> EnvState {
        let start = self.t + 1 - self.config.window_len;
        let mut extras = vec![0.0; OBS_EXTRAS];
        extras[self.position.index()] = 1.0;
        if self.config.reward_kind == RewardKind::PnlTrailing {
            let close = self.closes[self.t];
            extras[3] = (self.agent_price - close) / (self.config.trail_margin * close);
        }
        EnvState {
            t: self.t,
            position: self.position,
            agent_price: self.agent_price,
            observation: FeatureWindow {
                matrix: self.features.slice(s![start..=self.t, ..]).to_owned(),
                timestamps: self.timestamps[start..=self.t].to_vec(),
                end_timestamp: self.timestamps[self.t],
                target_index: self.t + 1,
            },
            extras,
            done: self.done,
        }
    }

    fn future_mean(&self) -> f64 {
        let last = (self.t + self.config.smoothing_horizon).min(self.closes.len() - 1);
        let slice = &self.closes[self.t + 1..=last];
        slice.iter().sum::<f64>() / slice.len() as f64
    }

    pub fn step(&mut self, action: Position) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::Domain("step called on a finished episode".into()));
        }
        let cfg = &self.config;
        let a = action.value();
        let price = self.closes[self.t];
        let next = self.closes[self.t + 1];
        let mut c = RewardComponents {
            pnl: match cfg.reward_kind {
                RewardKind::PnlSmoothed => (self.future_mean() / price - 1.0) * a,
                _ => (next / price - 1.0) * a,
            },
            fee: -cfg.commission * self.position.change_to(action),
            ..RewardComponents::default()
        };
        let scale = cfg.reward_scale.unwrap_or(1.0);
        let base = (c.pnl + c.fee) / scale;
        let reward = match cfg.reward_kind {
            RewardKind::Pnl | RewardKind::PnlSmoothed => base,
            RewardKind::PnlTrailing => {
                let band = cfg.trail_margin * next;
                self.agent_price = (self.agent_price * (1.0 + a * cfg.trail_step)).clamp(next - band, next + band);
                c.trail = trailing_reward(self.agent_price, next, cfg.trail_margin);
                (1.0 - cfg.trail_weight) * base + cfg.trail_weight * c.trail
            }
            RewardKind::PnlSharpe => {
                let before = rolling_sharpe(&self.pnl_stream, cfg.sharpe_window);
                self.pnl_stream.push(c.pnl + c.fee);
                c.sharpe_adj = rolling_sharpe(&self.pnl_stream, cfg.sharpe_window) - before;
                base + cfg.sharpe_weight * c.sharpe_adj
            }
        };
        self.position = action;
        self.t += 1;
        self.done = self.t + 1 == self.closes.len();
        Ok(StepOutcome {
            reward,
            components: c,
            next_state: self.state(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeStep {
    pub t: usize,
    pub timestamp: i64,
    pub prior_position: Position,
    pub action: Position,
    pub close: f64,
    pub reward: f64,
    pub components: RewardComponents,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
}

impl Episode {
    pub fn actions(&self) -> Vec<Position> {
        self.steps.iter().map(|s| s.action).collect()
    }

    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }

    /// Unscaled pnl plus fees over the episode.
    pub fn total_pnl(&self) -> f64 {
        self.steps.iter().map(|s| s.components.pnl + s.components.fee).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,timestamp,action,position,close,reward,r_pnl,r_fee,r_trail,r_sharpe_adj\n");
        for (i, s) in self.steps.iter().enumerate() {
            let c = &s.components;
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{},{},{},{}",
                s.timestamp,
                i8::from(s.action),
                i8::from(s.prior_position),
                s.close,
                s.reward,
                c.pnl,
                c.fee,
                c.trail,
                c.sharpe_adj
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Runs one full episode from reset. The policy returns a signed position
/// in {-1, 0, 1}; anything else is a domain error naming the step.
pub fn rollout<F>(env: &mut TradingEnv, mut policy: F, seed: u64) -> Result<Episode>
where
    F: FnMut(&EnvState, &mut ChaCha8Rng) -> Result<i64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = env.reset();
    let mut episode = Episode::default();
    while !state.done {
        let raw = policy(&state, &mut rng)?;
        let action = Position::from_signed(raw).map_err(|_| {
            Error::Domain(format!("policy returned {raw} at step {}", episode.steps.len()))
        })?;
        let out = env.step(action)?;
        episode.steps.push(EpisodeStep {
            t: state.t,
            timestamp: state.observation.end_timestamp,
            prior_position: state.position,
            action,
            close: env.closes[state.t],
            reward: out.reward,
            components: out.components,
        });
        state = out.next_state;
    }
    Ok(episode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::Candle;
    use rand::Rng;

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
                volume: 1.0,
            })
            .collect();
        CandleSeries::new("T", 60, candles).unwrap()
    }

    fn env(closes: &[f64], config: EnvConfig) -> TradingEnv {
        TradingEnv::from_series(&series(closes), &FeatureRecipe::default(), config).unwrap()
    }

    fn cfg(window_len: usize) -> EnvConfig {
        EnvConfig { window_len, ..EnvConfig::default() }
    }

    #[test]
    fn reset_state() {
        let mut e = env(&[100.0, 101.0, 102.0], cfg(2));
        let s = e.reset();
        assert_eq!((s.position, s.done, s.t), (Position::Flat, false, 1));
        assert_eq!(s.agent_price, 101.0);
        assert_eq!(s.extras, vec![0.0, 1.0, 0.0, 0.0]);
        assert!(matches!(
            TradingEnv::from_series(&series(&[1.0, 2.0]), &FeatureRecipe::default(), cfg(2)),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn pnl_and_fee_examples() {
        let mut e = env(&[100.0, 100.0, 110.0], cfg(1));
        e.reset();
        e.step(Position::Long).unwrap();
        let out = e.step(Position::Long).unwrap();
        assert!((out.reward - 0.10).abs() < 1e-12);
        assert!(out.next_state.done);
        assert!(e.step(Position::Long).is_err());

        let mut e = env(&[100.0, 100.0, 100.0], EnvConfig { commission: 0.001, ..cfg(1) });
        e.reset();
        e.step(Position::Short).unwrap();
        let out = e.step(Position::Long).unwrap();
        assert!((out.components.fee + 0.002).abs() < 1e-15);
    }

    #[test]
    fn trailing_endpoints() {
        assert_eq!(trailing_reward(100.0, 100.0, 0.01), 1.0);
        assert!(trailing_reward(101.0, 100.0, 0.01).abs() < 1e-12);
        assert!(trailing_reward(99.0, 100.0, 0.01).abs() < 1e-12);
    }

    #[test]
    fn trailing_agent_price_stays_inside_the_margin_band() {
        let config = EnvConfig { reward_kind: RewardKind::PnlTrailing, trail_weight: 1.0, trail_step: 0.5, ..cfg(1) };
        let mut e = env(&[100.0, 100.0, 100.0], config);
        e.reset();
        let out = e.step(Position::Long).unwrap();
        assert!((out.next_state.agent_price - 101.0).abs() < 1e-9);
        assert!(out.components.trail.abs() < 1e-9);
        assert!((out.next_state.extras[3] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn trailing_agent_price_moves_multiplicatively() {
        let config = EnvConfig { reward_kind: RewardKind::PnlTrailing, trail_weight: 1.0, ..cfg(1) };
        let mut e = env(&[100.0, 100.05, 100.0], config);
        e.reset();
        let out = e.step(Position::Long).unwrap();
        assert!((out.next_state.agent_price - 100.05).abs() < 1e-9);
        assert!((out.components.trail - 1.0).abs() < 1e-9);
        assert!((out.reward - out.components.trail).abs() < 1e-15);
    }

    #[test]
    fn smoothing_horizon_one_is_pnl() {
        let closes = [100.0, 101.0, 99.0, 102.0, 103.5, 101.0];
        let mut a = env(&closes, cfg(2));
        let mut b = env(&closes, EnvConfig { reward_kind: RewardKind::PnlSmoothed, smoothing_horizon: 1, ..cfg(2) });
        let acts = [1, -1, 0, 1];
        let ea = rollout(&mut a, |s, _| Ok(acts[s.t - 1]), 0).unwrap();
        let eb = rollout(&mut b, |s, _| Ok(acts[s.t - 1]), 0).unwrap();
        assert_eq!(ea.total_reward(), eb.total_reward());
    }

    #[test]
    fn smoothing_truncates_at_series_end() {
        let config = EnvConfig { reward_kind: RewardKind::PnlSmoothed, smoothing_horizon: 3, ..cfg(1) };
        let mut e = env(&[100.0, 102.0, 104.0, 106.0], config);
        e.reset();
        let first = e.step(Position::Long).unwrap();
        assert!((first.components.pnl - 0.04).abs() < 1e-12);
        let second = e.step(Position::Long).unwrap();
        assert!((second.components.pnl - (105.0 / 102.0 - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn rollout_examples() {
        let closes: Vec<f64> = (0..30).map(|i| 100.0 + (i as f64 * 0.7).sin() * 3.0).collect();
        let mut e = env(&closes, EnvConfig { commission: 0.0, ..cfg(4) });
        let flat = rollout(&mut e, |_, _| Ok(0), 1).unwrap();
        assert!(flat.steps.iter().all(|s| s.reward == 0.0 && s.components == RewardComponents::default()));

        let long = rollout(&mut e, |_, _| Ok(1), 1).unwrap();
        let expected: f64 = e.episode_returns().iter().sum();
        assert!((long.total_pnl() - expected).abs() < 1e-12);

        let mut e = env(&closes, EnvConfig { commission: 0.002, ..cfg(4) });
        let alt = rollout(&mut e, |s, _| Ok(if s.t % 2 == 0 { 1 } else { -1 }), 1).unwrap();
        let flips = alt.steps.windows(2).filter(|w| w[0].action != w[1].action).count();
        let fees: f64 = alt.steps.iter().map(|s| s.components.fee).sum();
        // the first step enters from flat, one unit
        assert!((fees - (-2.0 * 0.002 * flips as f64 - 0.002)).abs() < 1e-12);

        let err = rollout(&mut e, |_, _| Ok(2), 1).unwrap_err();
        assert!(err.to_string().contains("step 0"));
    }

    #[test]
    fn seeded_rollout_is_replayable() {
        let closes: Vec<f64> = (0..40).map(|i| 100.0 + i as f64 * 0.1).collect();
        let mut e = env(&closes, EnvConfig { reward_kind: RewardKind::PnlSharpe, ..cfg(3) });
        let policy = |_: &EnvState, rng: &mut ChaCha8Rng| Ok(rng.random_range(-1..=1));
        let a = rollout(&mut e, policy, 9).unwrap();
        let b = rollout(&mut e, policy, 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.to_csv().lines().next().unwrap(), "step,timestamp,action,position,close,reward,r_pnl,r_fee,r_trail,r_sharpe_adj");
    }
}
