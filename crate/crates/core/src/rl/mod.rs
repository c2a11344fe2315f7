//! Trading agents trained against [`crate::env::TradingEnv`].

mod ddqn;
mod distill;
mod policy;
mod ppo;

pub use ddqn::train_ddqn;
pub use distill::{
    collect_states, distill_policy, train_distilled, train_teacher_pool, DistillOutput, TeacherPool,
};
pub use policy::{Observation, PolicyGrads, PolicyNetwork, PolicySpec, PolicyTrace, NUM_ACTIONS};
pub use ppo::{train_ppo, ClipRecord};

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::backtest::Position;
use crate::env::{rollout, EnvState, Episode, TradingEnv};
use crate::error::{Error, Result};
use crate::nn::{Adam, AdamConfig};
use crate::normalization::NormLrMultipliers;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DdqnConfig {
    pub total_steps: usize,
    pub replay_capacity: usize,
    pub batch_size: usize,
    pub target_sync: usize,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_steps: usize,
    pub learning_starts: usize,
    pub train_every: usize,
}

impl Default for DdqnConfig {
    fn default() -> Self {
        DdqnConfig {
            total_steps: 20_000,
            replay_capacity: 50_000,
            batch_size: 64,
            target_sync: 1_000,
            epsilon_start: 1.0,
            epsilon_end: 0.05,
            epsilon_decay_steps: 10_000,
            learning_starts: 1_000,
            train_every: 1,
        }
    }
}

impl DdqnConfig {
    /// Linear anneal from `epsilon_start` to `epsilon_end`.
    pub fn epsilon(&self, step: usize) -> f64 {
        if self.epsilon_decay_steps == 0 {
            return self.epsilon_end;
        }
        let frac = (step as f64 / self.epsilon_decay_steps as f64).min(1.0);
        self.epsilon_start + frac * (self.epsilon_end - self.epsilon_start)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RlTrainConfig {
    pub iterations: usize,
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub update_epochs: usize,
    pub rollout_len: usize,
    pub minibatch_size: usize,
    pub entropy_weight: f64,
    pub value_weight: f64,
    pub max_grad_norm: f64,
    pub adam: AdamConfig,
    pub norm_lr: NormLrMultipliers,
    pub ddqn: DdqnConfig,
}

impl Default for RlTrainConfig {
    fn default() -> Self {
        RlTrainConfig {
            iterations: 30,
            gamma: 0.99,
            gae_lambda: 0.95,
            clip: 0.2,
            update_epochs: 4,
            rollout_len: 2048,
            minibatch_size: 64,
            entropy_weight: 0.01,
            value_weight: 0.5,
            max_grad_norm: 0.5,
            adam: AdamConfig {
                learning_rate: 3e-4,
                ..AdamConfig::default()
            },
            norm_lr: NormLrMultipliers::default(),
            ddqn: DdqnConfig::default(),
        }
    }
}

impl RlTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad("gamma must lie in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.gae_lambda) {
            return bad("gae_lambda must lie in [0, 1]");
        }
        if !(self.clip > 0.0) {
            return bad("clip must be positive");
        }
        if self.rollout_len == 0 || self.minibatch_size == 0 || self.update_epochs == 0 {
            return bad("rollout_len, minibatch_size and update_epochs must be at least 1");
        }
        if !(self.max_grad_norm > 0.0) {
            return bad("max_grad_norm must be positive");
        }
        let d = &self.ddqn;
        if d.batch_size == 0 || d.replay_capacity == 0 || d.target_sync == 0 || d.train_every == 0 {
            return bad("ddqn batch_size, replay_capacity, target_sync and train_every must be at least 1");
        }
        Ok(())
    }

    pub(crate) fn optimizer(&self) -> Adam {
        self.norm_lr.apply(Adam::new(self.adam))
    }
}

/// One row per PPO iteration or per completed DDQN episode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    pub steps: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub entropy: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
}

pub fn diagnostics_csv(rows: &[IterationDiagnostics]) -> String {
    let mut out = String::from("iteration,steps,mean_reward,reward_std,entropy,policy_loss,value_loss\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.iteration, r.steps, r.mean_reward, r.reward_std, r.entropy, r.policy_loss, r.value_loss
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct RlOutcome {
    pub policy: PolicyNetwork,
    pub diagnostics: Vec<IterationDiagnostics>,
    /// Iteration at which a non-finite loss stopped training; `policy` is
    /// then the last state that produced finite losses.
    pub aborted_at: Option<usize>,
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Walks the environments round-robin, one full episode each, resetting as
/// episodes finish.
pub(crate) struct EnvCursor {
    pub current: usize,
    pub state: EnvState,
}

pub(crate) struct Transition {
    pub env: usize,
    pub state: EnvState,
    pub reward: f64,
    pub next: EnvState,
    pub done: bool,
}

impl EnvCursor {
    pub fn new(envs: &mut [TradingEnv]) -> Result<Self> {
        let first = envs
            .first_mut()
            .ok_or_else(|| Error::Empty("training environments".into()))?;
        Ok(EnvCursor {
            current: 0,
            state: first.reset(),
        })
    }

    pub fn step(&mut self, envs: &mut [TradingEnv], action: Position) -> Result<Transition> {
        let env = self.current;
        let out = envs[env].step(action)?;
        let done = out.next_state.done;
        let state = std::mem::replace(&mut self.state, out.next_state.clone());
        if done {
            self.current = (self.current + 1) % envs.len();
            self.state = envs[self.current].reset();
        }
        Ok(Transition {
            env,
            state,
            reward: out.reward,
            next: out.next_state,
            done,
        })
    }
}

/// Greedy rollout of a trained policy.
pub fn evaluate_greedy(policy: &PolicyNetwork, env: &mut TradingEnv) -> Result<Episode> {
    rollout(
        env,
        |s, _| {
            let a = policy.greedy(&Observation::from(s))?;
            Ok(i64::from(i8::from(a)))
        },
        0,
    )
}
