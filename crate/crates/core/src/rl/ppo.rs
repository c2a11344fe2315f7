use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::Rng;

use super::policy::{Observation, PolicyGrads, PolicyNetwork, NUM_ACTIONS};
use super::{mean_std, EnvCursor, IterationDiagnostics, RlOutcome, RlTrainConfig};
use crate::backtest::Position;
use crate::env::TradingEnv;
use crate::error::Result;
use crate::nn::{entropy, softmax};
use crate::seed::rng_for;

/// Probability ratio and advantage seen by one surrogate-gradient
/// evaluation, and whether the sample contributed a policy gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipRecord {
    pub ratio: f64,
    pub advantage: f64,
    pub active: bool,
}

struct Sample {
    obs: Observation,
    action: usize,
    log_prob: f64,
    value: f64,
    reward: f64,
    done: bool,
}

fn sample_action<R: Rng + ?Sized>(p: &Array1<f64>, rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    NUM_ACTIONS - 1
}

/// Generalized advantage estimates and value targets.
fn gae(samples: &[Sample], last_value: f64, gamma: f64, lambda: f64) -> (Vec<f64>, Vec<f64>) {
    let n = samples.len();
    let mut adv = vec![0.0; n];
    let mut running = 0.0;
    for i in (0..n).rev() {
        let s = &samples[i];
        let next_value = if s.done {
            0.0
        } else if i + 1 < n {
            samples[i + 1].value
        } else {
            last_value
        };
        let keep = if s.done { 0.0 } else { 1.0 };
        let delta = s.reward + gamma * next_value - s.value;
        running = delta + gamma * lambda * keep * running;
        adv[i] = running;
    }
    let returns = adv.iter().zip(samples).map(|(a, s)| a + s.value).collect();
    (adv, returns)
}

struct MinibatchLoss {
    policy: f64,
    value: f64,
    entropy: f64,
}

fn minibatch_gradient(
    policy: &PolicyNetwork,
    samples: &[Sample],
    advantages: &[f64],
    returns: &[f64],
    batch: &[usize],
    config: &RlTrainConfig,
    records: &mut Vec<ClipRecord>,
) -> Result<(PolicyGrads, MinibatchLoss)> {
    let mut grads = PolicyGrads::zeros_like(policy);
    let mut loss = MinibatchLoss {
        policy: 0.0,
        value: 0.0,
        entropy: 0.0,
    };
    let eps = config.clip;
    for &i in batch {
        let s = &samples[i];
        let (logits, value, trace) = policy.forward(s.obs.window.view(), &s.obs.extras)?;
        let p = softmax(logits.as_slice().expect("contiguous"));
        let log_p = p.mapv(|v| v.max(1e-300).ln());
        let ratio = (log_p[s.action] - s.log_prob).exp();
        let a = advantages[i];
        let clipped = ratio.clamp(1.0 - eps, 1.0 + eps);
        loss.policy -= (ratio * a).min(clipped * a);
        let active = if a >= 0.0 { ratio <= 1.0 + eps } else { ratio >= 1.0 - eps };
        records.push(ClipRecord {
            ratio,
            advantage: a,
            active,
        });

        let h = entropy(p.as_slice().expect("contiguous"));
        loss.entropy += h;
        let mut d_logits = Array1::zeros(NUM_ACTIONS);
        for j in 0..NUM_ACTIONS {
            if active {
                let indicator = if j == s.action { 1.0 } else { 0.0 };
                d_logits[j] -= a * ratio * (indicator - p[j]);
            }
            d_logits[j] += config.entropy_weight * p[j] * (log_p[j] + h);
        }
        let err = value - returns[i];
        loss.value += err * err;
        let d_value = 2.0 * config.value_weight * err;
        grads.add_scaled(&policy.backward(&trace, &d_logits, d_value)?, 1.0);
    }
    let n = batch.len() as f64;
    grads.scale(1.0 / n);
    loss.policy /= n;
    loss.value /= n;
    loss.entropy /= n;
    Ok((grads, loss))
}

fn collect<R: Rng + ?Sized>(
    policy: &PolicyNetwork,
    envs: &mut [TradingEnv],
    cursor: &mut EnvCursor,
    steps: usize,
    rng: &mut R,
) -> Result<(Vec<Sample>, f64)> {
    let mut samples = Vec::with_capacity(steps);
    for _ in 0..steps {
        let obs = Observation::from(&cursor.state);
        let (logits, value, _) = policy.forward(obs.window.view(), &obs.extras)?;
        let p = softmax(logits.as_slice().expect("contiguous"));
        let action = sample_action(&p, rng);
        let tr = cursor.step(envs, Position::from_index(action)?)?;
        samples.push(Sample {
            obs,
            action,
            log_prob: p[action].max(1e-300).ln(),
            value,
            reward: tr.reward,
            done: tr.done,
        });
    }
    let last = Observation::from(&cursor.state);
    let (_, last_value, _) = policy.forward(last.window.view(), &last.extras)?;
    Ok((samples, last_value))
}

/// Clipped-surrogate policy optimization with GAE advantages. Rollouts walk
/// the environments round-robin. Returns the trained policy together with
/// every recorded clip decision.
pub fn train_ppo(
    envs: &mut [TradingEnv],
    mut policy: PolicyNetwork,
    config: &RlTrainConfig,
    seed: u64,
) -> Result<(RlOutcome, Vec<ClipRecord>)> {
    config.validate()?;
    let mut cursor = EnvCursor::new(envs)?;
    let mut action_rng = rng_for(seed, "ppo.actions");
    let mut shuffle_rng = rng_for(seed, "ppo.shuffle");
    let mut opt = config.optimizer();
    let mut diagnostics = Vec::new();
    let mut records = Vec::new();

    for iteration in 1..=config.iterations {
        let last_good = policy.clone();
        let (samples, last_value) = collect(&policy, envs, &mut cursor, config.rollout_len, &mut action_rng)?;
        let (mut adv, returns) = gae(&samples, last_value, config.gamma, config.gae_lambda);
        let (m, s) = mean_std(&adv);
        adv.iter_mut().for_each(|a| *a = (*a - m) / (s + 1e-8));

        let mut order: Vec<usize> = (0..samples.len()).collect();
        let (mut pl, mut vl, mut ent, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let mut failed = false;
        'epochs: for _ in 0..config.update_epochs {
            order.shuffle(&mut shuffle_rng);
            for batch in order.chunks(config.minibatch_size) {
                let (mut g, loss) = minibatch_gradient(&policy, &samples, &adv, &returns, batch, config, &mut records)?;
                if !(loss.policy.is_finite() && loss.value.is_finite()) {
                    failed = true;
                    break 'epochs;
                }
                g.clip_norm(config.max_grad_norm);
                if opt.step(&mut policy, &g).is_err() {
                    failed = true;
                    break 'epochs;
                }
                pl += loss.policy;
                vl += loss.value;
                ent += loss.entropy;
                batches += 1;
            }
        }
        if failed {
            return Ok((
                RlOutcome {
                    policy: last_good,
                    diagnostics,
                    aborted_at: Some(iteration),
                },
                records,
            ));
        }
        let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
        let (mean_reward, reward_std) = mean_std(&rewards);
        let b = batches.max(1) as f64;
        diagnostics.push(IterationDiagnostics {
            iteration,
            steps: iteration * config.rollout_len,
            mean_reward,
            reward_std,
            entropy: ent / b,
            policy_loss: pl / b,
            value_loss: vl / b,
        });
    }
    Ok((
        RlOutcome {
            policy,
            diagnostics,
            aborted_at: None,
        },
        records,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(reward: f64, value: f64, done: bool) -> Sample {
        Sample {
            obs: Observation {
                window: ndarray::Array2::zeros((1, 1)),
                extras: vec![],
            },
            action: 0,
            log_prob: 0.0,
            value,
            reward,
            done,
        }
    }

    #[test]
    fn gae_with_unit_lambda_is_discounted_return() {
        let s = vec![sample(1.0, 0.0, false), sample(2.0, 0.0, false), sample(3.0, 0.0, true)];
        let (adv, ret) = gae(&s, 99.0, 0.5, 1.0);
        assert_eq!(ret, vec![1.0 + 0.5 * 2.0 + 0.25 * 3.0, 2.0 + 1.5, 3.0]);
        assert_eq!(adv, ret);
    }

    #[test]
    fn gae_bootstraps_unfinished_rollouts() {
        let s = vec![sample(1.0, 0.5, false)];
        let (adv, ret) = gae(&s, 2.0, 0.9, 0.95);
        assert!((adv[0] - (1.0 + 0.9 * 2.0 - 0.5)).abs() < 1e-15);
        assert!((ret[0] - (1.0 + 0.9 * 2.0)).abs() < 1e-15);
    }
}
