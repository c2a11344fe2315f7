use ndarray::Array2;
use proptest::prelude::*;
use tradelab::backtest::{backtest_input, equity_curve, max_drawdown, BacktestInput, Position};
use tradelab::env::{EnvConfig, RewardKind, TradingEnv};
use tradelab::market_data::{feature_matrix, make_windows, split_sizes, Candle, CandleSeries, FeatureRecipe, FeatureWindow};
use tradelab::nn::{softmax, softmax_with_temperature};
use tradelab::normalization::{static_normalize, DatasetStats, StaticNormKind};
use tradelab::sentiment::{aggregate, SentimentRecord};
use tradelab::supervised::classification_metrics;

fn closes_strategy(min: usize, max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-0.03f64..0.03, min..max).prop_map(|steps| {
        let mut close = 100.0;
        steps
            .into_iter()
            .map(|s| {
                close *= 1.0 + s;
                close
            })
            .collect()
    })
}

fn series(closes: &[f64]) -> CandleSeries {
    let candles = closes
        .iter()
        .enumerate()
        .map(|(i, &close)| {
            let open = if i == 0 { close } else { closes[i - 1] };
            Candle {
                timestamp: 60 * i as i64,
                open,
                high: open.max(close),
                low: open.min(close),
                close,
                volume: 1.0 + i as f64,
            }
        })
        .collect();
    CandleSeries::new("P", 60, candles).unwrap()
}

fn position(i: u8) -> Position {
    Position::from_index(i as usize % 3).unwrap()
}

fn window(rows: usize, cols: usize, values: &[f64]) -> FeatureWindow {
    FeatureWindow {
        matrix: Array2::from_shape_fn((rows, cols), |(r, c)| values[(r * cols + c) % values.len()]),
        timestamps: (0..rows as i64).collect(),
        end_timestamp: rows as i64 - 1,
        target_index: rows,
    }
}

proptest! {
    #[test]
    fn windows_never_include_their_target(closes in closes_strategy(12, 60), len in 1usize..8, stride in 1usize..4) {
        let s = series(&closes);
        let features = feature_matrix(&s, &FeatureRecipe::default());
        for w in make_windows(&s, len, stride, &FeatureRecipe::default()).unwrap() {
            let target_ts = s.candles()[w.target_index].timestamp;
            prop_assert!(w.timestamps.iter().all(|&t| t < target_ts));
            prop_assert_eq!(w.end_timestamp, *w.timestamps.last().unwrap());
            let start = w.end_index() + 1 - len;
            prop_assert_eq!(w.matrix.view(), features.slice(ndarray::s![start..=w.end_index(), ..]));
        }
    }

    #[test]
    fn split_sizes_partition_the_series(n in 100usize..5000, a in 0.05f64..0.9) {
        let rest = 1.0 - a;
        let (tr, va, te) = split_sizes(n, (a, rest / 2.0, rest / 2.0)).unwrap();
        prop_assert_eq!(tr + va + te, n);
    }

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50f64..50.0, 1..8), t in 0.1f64..10.0) {
        for p in [softmax(&logits), softmax_with_temperature(&logits, t).unwrap()] {
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn zscore_matrix_stats_center_the_training_rows(values in prop::collection::vec(-5f64..5.0, 24..120)) {
        let rows = values.len() / 3;
        let m = Array2::from_shape_fn((rows, 3), |(r, c)| values[r * 3 + c] * (c + 1) as f64);
        let stats = DatasetStats::fit_matrix(m.view()).unwrap();
        let z = stats.zscore(m.view()).unwrap();
        for col in z.columns() {
            prop_assert!(col.mean().unwrap().abs() < 1e-9);
        }
    }

    #[test]
    fn per_sample_normalizations_keep_shape_and_finiteness(
        values in prop::collection::vec(-1e3f64..1e3, 1..40),
        rows in 1usize..10,
        cols in 1usize..5,
    ) {
        let w = window(rows, cols, &values);
        for kind in [StaticNormKind::SampleAverage, StaticNormKind::SampleStandardization, StaticNormKind::InstanceNormalization] {
            let out = static_normalize(&w, kind, None).unwrap();
            prop_assert_eq!(out.matrix.dim(), (rows, cols));
            prop_assert!(out.matrix.iter().all(|v| v.is_finite()));
            prop_assert_eq!(&out.timestamps, &w.timestamps);
        }
    }

    #[test]
    fn backtest_metrics_stay_in_range(
        returns in prop::collection::vec(-0.2f64..0.2, 1..80),
        picks in prop::collection::vec(0u8..3, 80),
        commission in 0f64..0.01,
    ) {
        let positions: Vec<Position> = picks[..returns.len()].iter().map(|&i| position(i)).collect();
        let input = BacktestInput::new(returns.clone(), positions, commission);
        prop_assert!(input.fees().iter().all(|&f| f >= 0.0));
        let report = backtest_input(&input, 0.0).unwrap();
        prop_assert!((0.0..=1.0).contains(&report.max_drawdown));
        prop_assert_eq!(report.equity_curve.len(), returns.len() + 1);
        let flat = BacktestInput::new(returns.clone(), vec![Position::Flat; returns.len()], commission);
        let flat = backtest_input(&flat, 0.0).unwrap();
        prop_assert_eq!(flat.pnl, 0.0);
        prop_assert_eq!(flat.n_trades, 0);
    }

    #[test]
    fn drawdown_of_a_rising_curve_is_zero(steps in prop::collection::vec(0f64..0.05, 1..50)) {
        prop_assert_eq!(max_drawdown(&equity_curve(&steps)).unwrap(), 0.0);
    }

    #[test]
    fn kappa_and_f1_are_bounded(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..200)) {
        let (pred, truth): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let m = classification_metrics(&pred, &truth, 3).unwrap();
        prop_assert!((-1.0..=1.0).contains(&m.kappa));
        prop_assert!((0.0..=1.0).contains(&m.macro_f1));
        prop_assert_eq!(m.confusion.iter().flatten().sum::<u64>(), pred.len() as u64);
    }

    #[test]
    fn trailing_reward_stays_in_unit_interval(
        closes in closes_strategy(20, 60),
        picks in prop::collection::vec(0u8..3, 60),
        step in 0.0001f64..0.5,
        margin in 0.001f64..0.05,
    ) {
        let cfg = EnvConfig {
            window_len: 4,
            reward_kind: RewardKind::PnlTrailing,
            trail_step: step,
            trail_margin: margin,
            ..EnvConfig::default()
        };
        let mut env = TradingEnv::from_series(&series(&closes), &FeatureRecipe::default(), cfg).unwrap();
        let mut state = env.reset();
        let mut i = 0;
        while !state.done {
            let out = env.step(position(picks[i % picks.len()])).unwrap();
            prop_assert!((-1e-12..=1.0 + 1e-12).contains(&out.components.trail));
            prop_assert!(out.next_state.extras[3].abs() <= 1.0 + 1e-12);
            state = out.next_state;
            i += 1;
        }
    }

    #[test]
    fn sentiment_slots_only_see_their_own_past(
        closes in closes_strategy(5, 30),
        stamps in prop::collection::vec(-100i64..2000, 0..60),
        cap in 1f64..120.0,
    ) {
        let s = series(&closes);
        let records: Vec<SentimentRecord> = stamps
            .iter()
            .map(|&t| SentimentRecord { timestamp: t, positive: 0.6, negative: 0.2, source: "x".into() })
            .collect();
        let (slots, report) = aggregate(&records, &s, cap).unwrap();
        let placed: usize = slots.slots.iter().map(|x| x.count).sum();
        prop_assert_eq!(placed + report.out_of_range(), records.len());
        for slot in &slots.slots {
            let inside = stamps.iter().filter(|&&t| t >= slot.timestamp && t < slot.timestamp + 60).count();
            prop_assert_eq!(slot.count, inside);
            prop_assert!(slot.staleness_minutes >= 0.0 && slot.staleness_minutes <= cap);
        }
    }
}
