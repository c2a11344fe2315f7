use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tradelab::env::{EnvConfig, RewardKind, TradingEnv};
use tradelab::market_data::{Candle, CandleSeries, FeatureRecipe};
use tradelab::nn::{AdamConfig, ParamBlocks};
use tradelab::rl::{train_ddqn, train_ppo, PolicyNetwork, PolicySpec, RlTrainConfig};
use tradelab::seed::rng_for;

fn series(n: usize, seed: u64) -> CandleSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut close: f64 = 50.0;
    let candles = (0..n)
        .map(|i| {
            let open = close;
            close *= 1.0 + rng.random_range(-0.01..0.01);
            Candle {
                timestamp: 60 * i as i64,
                open,
                high: open.max(close),
                low: open.min(close),
                close,
                volume: 10.0,
            }
        })
        .collect();
    CandleSeries::new("T", 60, candles).unwrap()
}

fn env(kind: RewardKind) -> TradingEnv {
    let cfg = EnvConfig {
        window_len: 6,
        commission: 0.001,
        reward_kind: kind,
        reward_scale: Some(0.01),
        ..EnvConfig::default()
    };
    TradingEnv::from_series(&series(200, 4), &FeatureRecipe::default(), cfg).unwrap()
}

fn policy(seed: u64) -> PolicyNetwork {
    let spec = PolicySpec::new(6, FeatureRecipe::default().width(), &[16], None).unwrap();
    PolicyNetwork::new(spec, &mut rng_for(seed, "policy"))
}

fn small_ppo() -> RlTrainConfig {
    RlTrainConfig {
        iterations: 4,
        rollout_len: 256,
        minibatch_size: 32,
        ..RlTrainConfig::default()
    }
}

fn params(p: &PolicyNetwork) -> Vec<f64> {
    p.blocks().iter().flat_map(|b| b.data.to_vec()).collect()
}

#[test]
fn clip_records_follow_the_surrogate_rule() {
    let cfg = RlTrainConfig {
        adam: AdamConfig {
            learning_rate: 1e-2,
            ..AdamConfig::default()
        },
        ..small_ppo()
    };
    let (_, records) = train_ppo(&mut [env(RewardKind::PnlTrailing)], policy(1), &cfg, 9).unwrap();
    assert!(!records.is_empty());
    let eps = cfg.clip;
    let mut inactive = 0;
    for r in &records {
        let clipped_out = (r.advantage > 0.0 && r.ratio > 1.0 + eps) || (r.advantage < 0.0 && r.ratio < 1.0 - eps);
        assert_eq!(r.active, !clipped_out, "{r:?}");
        inactive += usize::from(!r.active);
    }
    // A large learning rate must push some ratios out of the trust region.
    assert!(inactive > 0);
}

#[test]
fn heavy_entropy_bonus_keeps_the_policy_near_uniform() {
    let cfg = RlTrainConfig {
        entropy_weight: 5.0,
        ..small_ppo()
    };
    let (out, _) = train_ppo(&mut [env(RewardKind::Pnl)], policy(2), &cfg, 3).unwrap();
    let last = out.diagnostics.last().unwrap();
    assert!(last.entropy >= 0.95 * 3f64.ln(), "entropy {}", last.entropy);
}

#[test]
fn ddqn_with_zero_learning_rate_leaves_parameters_unchanged() {
    let cfg = RlTrainConfig {
        adam: AdamConfig {
            learning_rate: 0.0,
            ..AdamConfig::default()
        },
        ddqn: tradelab::rl::DdqnConfig {
            total_steps: 400,
            learning_starts: 50,
            batch_size: 16,
            target_sync: 40,
            ..Default::default()
        },
        ..RlTrainConfig::default()
    };
    let init = policy(5);
    let out = train_ddqn(&mut [env(RewardKind::Pnl)], init.clone(), &cfg, 1).unwrap();
    assert_eq!(params(&out.policy), params(&init));
}

#[test]
fn same_seed_same_policy_and_different_seed_differs() {
    let cfg = small_ppo();
    let run = |seed| train_ppo(&mut [env(RewardKind::PnlSharpe)], policy(7), &cfg, seed).unwrap().0;
    let (a, b, c) = (run(11), run(11), run(12));
    assert_eq!(params(&a.policy), params(&b.policy));
    assert_eq!(a.diagnostics, b.diagnostics);
    assert_ne!(params(&a.policy), params(&c.policy));
}

#[test]
fn every_reward_kind_trains_with_finite_losses() {
    for kind in [RewardKind::Pnl, RewardKind::PnlSmoothed, RewardKind::PnlTrailing, RewardKind::PnlSharpe] {
        let (out, _) = train_ppo(&mut [env(kind)], policy(3), &small_ppo(), 0).unwrap();
        assert!(out.aborted_at.is_none(), "{kind:?}");
        assert!(out.diagnostics.iter().all(|d| d.value_loss.is_finite() && d.policy_loss.is_finite()));
    }
}
