use std::collections::VecDeque;

use ndarray::Array1;
use rand::Rng;

use super::policy::{PolicyGrads, PolicyNetwork, NUM_ACTIONS};
use super::{mean_std, EnvCursor, IterationDiagnostics, RlOutcome, RlTrainConfig};
use crate::backtest::Position;
use crate::env::{TradingEnv, OBS_EXTRAS};
use crate::error::Result;
use crate::supervised::argmax;
use crate::seed::rng_for;

/// Stored by step index so the window can be sliced back out of the
/// environment instead of being copied into the buffer.
#[derive(Debug, Clone, Copy)]
struct Replay {
    env: usize,
    t: usize,
    extras: [f64; OBS_EXTRAS],
    action: usize,
    reward: f64,
    next_t: usize,
    next_extras: [f64; OBS_EXTRAS],
    done: bool,
}

fn extras_array(v: &[f64]) -> [f64; OBS_EXTRAS] {
    let mut out = [0.0; OBS_EXTRAS];
    out.copy_from_slice(v);
    out
}

fn q_values(net: &PolicyNetwork, env: &TradingEnv, t: usize, extras: &[f64]) -> Result<Array1<f64>> {
    net.forward(env.window(t), extras).map(|(q, _, _)| q)
}

/// Entropy of the epsilon-greedy action distribution.
fn epsilon_entropy(eps: f64) -> f64 {
    let k = NUM_ACTIONS as f64;
    let explore = eps / k;
    let greedy = 1.0 - eps + explore;
    let term = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
    term(greedy) + (k - 1.0) * term(explore)
}

fn td_gradient(
    online: &PolicyNetwork,
    target: &PolicyNetwork,
    envs: &[TradingEnv],
    batch: &[Replay],
    gamma: f64,
) -> Result<(PolicyGrads, f64)> {
    let mut grads = PolicyGrads::zeros_like(online);
    let mut loss = 0.0;
    for r in batch {
        let env = &envs[r.env];
        let bootstrap = if r.done {
            0.0
        } else {
            let next_online = q_values(online, env, r.next_t, &r.next_extras)?;
            let best = argmax(next_online.as_slice().expect("contiguous"));
            q_values(target, env, r.next_t, &r.next_extras)?[best]
        };
        let y = r.reward + gamma * bootstrap;
        let (q, _, trace) = online.forward(env.window(r.t), &r.extras)?;
        let td = q[r.action] - y;
        // Huber loss with unit threshold
        loss += if td.abs() <= 1.0 { 0.5 * td * td } else { td.abs() - 0.5 };
        let mut d = Array1::zeros(NUM_ACTIONS);
        d[r.action] = td.clamp(-1.0, 1.0);
        grads.add_scaled(&online.backward(&trace, &d, 0.0)?, 1.0);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    Ok((grads, loss / n))
}

/// Double Q-learning: the online network picks the bootstrap action and a
/// periodically synced target network evaluates it. Q-values live in the
/// policy head; the value head is unused.
pub fn train_ddqn(
    envs: &mut [TradingEnv],
    mut online: PolicyNetwork,
    config: &RlTrainConfig,
    seed: u64,
) -> Result<RlOutcome> {
    config.validate()?;
    let d = config.ddqn;
    let mut cursor = EnvCursor::new(envs)?;
    let mut explore_rng = rng_for(seed, "ddqn.explore");
    let mut replay_rng = rng_for(seed, "ddqn.replay");
    let mut opt = config.optimizer();
    let mut target = online.clone();
    let mut buffer: VecDeque<Replay> = VecDeque::with_capacity(d.replay_capacity.min(1 << 16));
    let mut diagnostics = Vec::new();
    let mut episode_rewards = Vec::new();
    let mut losses = Vec::new();

    for step in 0..d.total_steps {
        let eps = d.epsilon(step);
        let state = &cursor.state;
        let action = if explore_rng.random::<f64>() < eps {
            explore_rng.random_range(0..NUM_ACTIONS)
        } else {
            let q = q_values(&online, &envs[cursor.current], state.t, &state.extras)?;
            argmax(q.as_slice().expect("contiguous"))
        };
        let tr = cursor.step(envs, Position::from_index(action)?)?;
        if buffer.len() == d.replay_capacity {
            buffer.pop_front();
        }
        buffer.push_back(Replay {
            env: tr.env,
            t: tr.state.t,
            extras: extras_array(&tr.state.extras),
            action,
            reward: tr.reward,
            next_t: tr.next.t,
            next_extras: extras_array(&tr.next.extras),
            done: tr.done,
        });
        episode_rewards.push(tr.reward);

        if step + 1 >= d.learning_starts && (step + 1) % d.train_every == 0 && buffer.len() >= d.batch_size {
            let batch: Vec<Replay> = (0..d.batch_size)
                .map(|_| buffer[replay_rng.random_range(0..buffer.len())])
                .collect();
            let (mut g, loss) = td_gradient(&online, &target, envs, &batch, config.gamma)?;
            if !loss.is_finite() {
                return Ok(RlOutcome {
                    policy: online,
                    diagnostics,
                    aborted_at: Some(step + 1),
                });
            }
            g.clip_norm(config.max_grad_norm);
            opt.step(&mut online, &g)?;
            losses.push(loss);
        }
        if (step + 1) % d.target_sync == 0 {
            target = online.clone();
        }
        if tr.done {
            let (mean_reward, reward_std) = mean_std(&episode_rewards);
            let (loss, _) = mean_std(&losses);
            diagnostics.push(IterationDiagnostics {
                iteration: diagnostics.len() + 1,
                steps: step + 1,
                mean_reward,
                reward_std,
                entropy: epsilon_entropy(eps),
                policy_loss: loss,
                value_loss: 0.0,
            });
            episode_rewards.clear();
            losses.clear();
        }
    }
    Ok(RlOutcome {
        policy: online,
        diagnostics,
        aborted_at: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epsilon_entropy_endpoints() {
        assert_eq!(epsilon_entropy(0.0), 0.0);
        assert!((epsilon_entropy(1.0) - 3f64.ln()).abs() < 1e-12);
    }
}
