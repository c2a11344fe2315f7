//! The four subcommands. Each writes its artifacts, plus the resolved
//! config that produced them, under `<output_dir>/<command>/`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use tradelab::backtest::{backtest_input, comparison_table, BacktestInput, BacktestReport, Position};
use tradelab::env::{EnvConfig, Episode};
use tradelab::market_data::{Gap, SplitKind};
use tradelab::nn::{AdaptiveNormSpec, Checkpoint, Network, NetworkSpec};
use tradelab::rl::{
    collect_states, diagnostics_csv, evaluate_greedy, train_ddqn, train_distilled, train_ppo,
    train_teacher_pool, PolicyNetwork, PolicySpec,
};
use tradelab::seed::{derive_seed, rng_for};
use tradelab::supervised::{
    argmax, init_okd_networks, make_labels, metrics_csv, train_baseline, train_okd,
    NUM_CLASSES,
};

use crate::config::{ExperimentConfig, Mode, NormKind};
use crate::error::{CliError, Context};
use crate::pipeline::{env_config, labeled_windows, load_dataset, make_env, Normalizer, Part, SentimentCoverage};

pub const CLASSIFIER_KIND: &str = "classifier";
pub const POLICY_KIND: &str = "policy";

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn command_dir(cfg: &ExperimentConfig, name: &str) -> Result<PathBuf, CliError> {
    let dir = cfg.output_dir.join(name);
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    write(&dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

fn to_json<T: Serialize>(value: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(value).map_err(|e| CliError::Checkpoint(format!("cannot serialize: {e}")))
}

// ---------------------------------------------------------------------------
// ingest

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IngestSummary {
    pub asset_id: String,
    pub candles: usize,
    pub frequency: i64,
    pub first_timestamp: i64,
    pub last_timestamp: i64,
    pub gaps: Vec<Gap>,
    pub feature_cols: usize,
    /// Candle counts of the train, validation and test partitions.
    pub split: [usize; 3],
    /// Label counts (short, flat, long) over the training partition.
    pub train_class_balance: [usize; NUM_CLASSES],
    pub sentiment: Option<SentimentCoverage>,
    pub warnings: Vec<String>,
}

pub fn ingest(cfg: &ExperimentConfig) -> Result<IngestSummary, CliError> {
    let dir = command_dir(cfg, "ingest")?;
    let data = load_dataset(cfg)?;
    let candles = data.series.candles();
    let (first, last) = (candles[0].timestamp, candles[candles.len() - 1].timestamp);
    let train = data.splits.train();
    let sizes = [train.series.len(), data.splits.validation().series.len(), data.splits.test().series.len()];
    let balance = if train.series.len() >= 2 {
        make_labels(&train.series, &cfg.training.labels).context(|| "labelling".into())?.counts
    } else {
        [0; NUM_CLASSES]
    };
    let mut warnings = Vec::new();
    if let Some(s) = &data.sentiment {
        match (s.first_timestamp, s.last_timestamp) {
            (Some(a), Some(b)) if b < first || a > last + data.series.frequency() => warnings.push(format!(
                "sentiment records span [{a}, {b}] and do not overlap the candles [{first}, {last}]"
            )),
            (None, _) => warnings.push("sentiment file has no records".into()),
            _ => {}
        }
        if s.report.out_of_range() > 0 {
            warnings.push(format!(
                "{} of {} sentiment records fall outside the candle grid",
                s.report.out_of_range(),
                s.records
            ));
        }
    }
    let summary = IngestSummary {
        asset_id: data.series.asset_id().to_string(),
        candles: candles.len(),
        frequency: data.series.frequency(),
        first_timestamp: first,
        last_timestamp: last,
        gaps: data.series.gaps(),
        feature_cols: data.feature_cols,
        split: sizes,
        train_class_balance: balance,
        sentiment: data.sentiment.clone(),
        warnings,
    };
    write(&dir.join("summary.json"), to_json(&summary)?)?;
    Ok(summary)
}

// ---------------------------------------------------------------------------
// train

/// Stored in every checkpoint so backtests reuse exactly what training saw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingProvenance {
    pub mode: Mode,
    pub seed: u64,
    pub role: String,
    /// Last candle timestamp any training-phase computation read.
    pub train_end_timestamp: i64,
    pub window: usize,
    pub feature_cols: usize,
    pub normalizer: Normalizer,
    pub env: Option<EnvConfig>,
}

const PROVENANCE_KEY: &str = "provenance";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub mode: Mode,
    pub checkpoints: Vec<PathBuf>,
    pub metrics: PathBuf,
    pub access_log: Vec<SplitKind>,
    pub warnings: Vec<String>,
}

fn classifier_spec(cfg: &ExperimentConfig, cols: usize) -> NetworkSpec {
    NetworkSpec {
        input_rows: cfg.features.window,
        input_cols: cols,
        extra_inputs: 0,
        hidden: cfg.model.hidden.clone(),
        output_dim: NUM_CLASSES,
        activation: cfg.model.activation,
        output_activation: tradelab::nn::Activation::Identity,
        adaptive_norm: adaptive_spec(cfg),
    }
}

fn adaptive_spec(cfg: &ExperimentConfig) -> Option<AdaptiveNormSpec> {
    (cfg.normalization.kind == NormKind::Adaptive).then_some(AdaptiveNormSpec {
        use_gate: cfg.normalization.use_gate,
    })
}

fn policy_spec(cfg: &ExperimentConfig, cols: usize) -> Result<PolicySpec, CliError> {
    PolicySpec::new(cfg.features.window, cols, &cfg.model.hidden, adaptive_spec(cfg)).context(|| "policy spec".into())
}

/// Contiguous chunks of the training partition, one per teacher.
fn chunks(part: &Part, count: usize, min_len: usize) -> Result<Vec<Part>, CliError> {
    let n = part.series.len();
    let size = n / count;
    if size < min_len {
        return Err(CliError::Config(vec![format!(
            "training.distill.teachers = {count} leaves {size} candles per teacher, need at least {min_len}"
        )]));
    }
    Ok((0..count)
        .map(|k| {
            let (a, b) = (k * size, if k + 1 == count { n } else { (k + 1) * size });
            Part {
                series: part.series.slice(a, b),
                features: part.features.slice(ndarray::s![a..b, ..]).to_owned(),
            }
        })
        .collect())
}

pub fn train(cfg: &ExperimentConfig) -> Result<TrainSummary, CliError> {
    let dir = command_dir(cfg, "train")?;
    let ckpt_dir = dir.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::io(&ckpt_dir, e))?;
    let data = load_dataset(cfg)?;
    let train = data.splits.train();
    let norm = Normalizer::fit(cfg.normalization.kind, train)?;
    let cols = data.feature_cols;
    let seed = cfg.seed;
    let mode = cfg.training.mode;
    let mut warnings = Vec::new();
    let mut saved: Vec<(String, Checkpoint)> = Vec::new();

    let (metrics, train_end, env) = match mode {
        Mode::Supervised | Mode::Okd => {
            let validation = data.splits.validation();
            let train_set = labeled_windows(cfg, train, &norm)?;
            let val_set = labeled_windows(cfg, validation, &norm).ok().filter(|v| !v.is_empty());
            let end = val_set
                .as_ref()
                .and(validation.last_timestamp())
                .or(train.last_timestamp())
                .unwrap_or(i64::MIN);
            let spec = classifier_spec(cfg, cols);
            if mode == Mode::Supervised {
                let net = Network::new(spec, &mut rng_for(seed, "model"));
                let out = train_baseline(&train_set, val_set.as_ref(), net, &cfg.training.supervised, derive_seed(seed, "train"))
                    .context(|| "supervised training".into())?;
                warnings.extend(out.warnings);
                saved.push(("model".into(), out.net.to_checkpoint(CLASSIFIER_KIND).context(|| "checkpoint".into())?));
                (metrics_csv(&out.history), end, None)
            } else {
                let (teachers, student) = init_okd_networks(&spec, cfg.training.okd.teachers, seed);
                let out = train_okd(
                    &train_set,
                    val_set.as_ref(),
                    teachers,
                    student,
                    &cfg.training.supervised,
                    &cfg.training.okd,
                    seed,
                )
                .context(|| "online distillation".into())?;
                warnings.extend(out.warnings);
                for (k, t) in out.teachers.iter().enumerate() {
                    saved.push((format!("teacher_{}", k + 1), t.to_checkpoint(CLASSIFIER_KIND).context(|| "checkpoint".into())?));
                }
                saved.push(("student".into(), out.student.to_checkpoint(CLASSIFIER_KIND).context(|| "checkpoint".into())?));
                (metrics_csv(&out.history), end, None)
            }
        }
        Mode::Ppo | Mode::Ddqn | Mode::Distill => {
            let env_cfg = env_config(cfg, train)?;
            let spec = policy_spec(cfg, cols)?;
            let end = train.last_timestamp().unwrap_or(i64::MIN);
            let rl = &cfg.training.rl;
            let metrics = match mode {
                Mode::Ppo | Mode::Ddqn => {
                    let mut envs = vec![make_env(train, &norm, &env_cfg)?];
                    let init = PolicyNetwork::new(spec, &mut rng_for(seed, "policy"));
                    let out = if mode == Mode::Ppo {
                        train_ppo(&mut envs, init, rl, derive_seed(seed, "ppo")).context(|| "PPO training".into())?.0
                    } else {
                        train_ddqn(&mut envs, init, rl, derive_seed(seed, "ddqn")).context(|| "DDQN training".into())?
                    };
                    if let Some(it) = out.aborted_at {
                        warnings.push(format!("training stopped at iteration {it} on a non-finite loss"));
                    }
                    saved.push(("policy".into(), out.policy.to_checkpoint(POLICY_KIND).context(|| "checkpoint".into())?));
                    diagnostics_csv(&out.diagnostics)
                }
                _ => {
                    let d = cfg.training.distill;
                    let parts = chunks(train, d.teachers, env_cfg.min_len())?;
                    let subsets = parts
                        .iter()
                        .enumerate()
                        .map(|(k, p)| Ok((format!("chunk_{}", k + 1), vec![make_env(p, &norm, &env_cfg)?])))
                        .collect::<Result<Vec<_>, CliError>>()?;
                    let pool = train_teacher_pool(subsets, &spec, rl, d.temperature, seed).context(|| "teacher pool".into())?;
                    let mut envs = vec![make_env(train, &norm, &env_cfg)?];
                    let states = collect_states(&pool, &mut envs).context(|| "collecting states".into())?;
                    let student = PolicyNetwork::new(spec, &mut rng_for(seed, "student"));
                    let (student, losses) =
                        train_distilled(&pool, student, &states, d.epochs, d.batch_size, d.adam, derive_seed(seed, "distill"))
                            .context(|| "policy distillation".into())?;
                    for (k, t) in pool.teachers().iter().enumerate() {
                        saved.push((format!("teacher_{}", k + 1), t.to_checkpoint(POLICY_KIND).context(|| "checkpoint".into())?));
                    }
                    saved.push(("student".into(), student.to_checkpoint(POLICY_KIND).context(|| "checkpoint".into())?));
                    let mut csv = String::from("epoch,distill_loss\n");
                    for (e, l) in losses.iter().enumerate() {
                        csv.push_str(&format!("{},{l}\n", e + 1));
                    }
                    csv
                }
            };
            (metrics, end, Some(env_cfg))
        }
    };

    let access_log = data.splits.access_log();
    if data.splits.test_accessed() {
        return Err(CliError::Overlap("training read the test partition".into()));
    }
    let mut checkpoints = Vec::new();
    for (role, ckpt) in saved {
        let provenance = TrainingProvenance {
            mode,
            seed,
            role: role.clone(),
            train_end_timestamp: train_end,
            window: cfg.features.window,
            feature_cols: cols,
            normalizer: norm.clone(),
            env: env.clone(),
        };
        let path = ckpt_dir.join(format!("{role}.json"));
        ckpt.with_metadata(PROVENANCE_KEY, &provenance)
            .context(|| "checkpoint metadata".into())?
            .save(&path)
            .context(|| format!("saving {}", path.display()))?;
        checkpoints.push(path);
    }
    let metrics_path = dir.join("metrics.csv");
    write(&metrics_path, metrics)?;
    write(&dir.join("access_log.json"), to_json(&access_log)?)?;
    Ok(TrainSummary {
        mode,
        checkpoints,
        metrics: metrics_path,
        access_log,
        warnings,
    })
}

// ---------------------------------------------------------------------------
// backtest

/// Constant-position reference strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Flat,
    Long,
    Short,
}

impl Baseline {
    fn position(self) -> Position {
        match self {
            Baseline::Flat => Position::Flat,
            Baseline::Long => Position::Long,
            Baseline::Short => Position::Short,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Baseline::Flat => "baseline_flat",
            Baseline::Long => "baseline_long",
            Baseline::Short => "baseline_short",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestSummary {
    pub rows: Vec<(String, BacktestReport)>,
    pub table: String,
}

/// Checkpoints the train command leaves for the configured mode.
pub fn default_checkpoints(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let dir = cfg.output_dir.join("train").join("checkpoints");
    let name = match cfg.training.mode {
        Mode::Supervised => "model",
        Mode::Ppo | Mode::Ddqn => "policy",
        Mode::Okd | Mode::Distill => "student",
    };
    vec![dir.join(format!("{name}.json"))]
}

/// Returns `close[t+1] / close[t] - 1` for every tradable step of the test
/// partition, the steps after the first full window.
fn test_returns(test: &Part, window: usize) -> Vec<f64> {
    let closes = test.series.closes();
    (window.saturating_sub(1)..closes.len().saturating_sub(1))
        .map(|t| closes[t + 1] / closes[t] - 1.0)
        .collect()
}

fn check_provenance(path: &Path, ckpt: &Checkpoint, test: &Part, cols: usize, window: usize) -> Result<TrainingProvenance, CliError> {
    let prov: TrainingProvenance = ckpt
        .metadata(PROVENANCE_KEY)
        .ok()
        .flatten()
        .ok_or_else(|| CliError::Checkpoint(format!("{}: missing training provenance", path.display())))?;
    if let Some(first) = test.first_timestamp() {
        if first <= prov.train_end_timestamp {
            return Err(CliError::Overlap(format!(
                "{} was trained on data up to timestamp {} but the test partition starts at {first}",
                path.display(),
                prov.train_end_timestamp
            )));
        }
    }
    if prov.feature_cols != cols {
        return Err(CliError::Checkpoint(format!(
            "{}: checkpoint expects {} feature columns but the configured features produce {cols}",
            path.display(),
            prov.feature_cols
        )));
    }
    if prov.window != window {
        return Err(CliError::Checkpoint(format!(
            "{}: checkpoint expects windows of {} rows but features.window is {window}",
            path.display(),
            prov.window
        )));
    }
    Ok(prov)
}

fn classifier_positions(
    cfg: &ExperimentConfig,
    net: &Network,
    test: &Part,
    norm: &Normalizer,
    returns: &[f64],
) -> Result<Vec<Position>, CliError> {
    let spec = net.spec();
    if spec.input_cols != test.features.ncols() || spec.input_rows != cfg.features.window {
        return Err(CliError::Checkpoint(format!(
            "network expects {}x{} windows but the data gives {}x{}",
            spec.input_rows,
            spec.input_cols,
            cfg.features.window,
            test.features.ncols()
        )));
    }
    let windows = tradelab::market_data::frame_windows(&test.series, test.features.view(), cfg.features.window, 1)
        .context(|| "framing test windows".into())?;
    let windows = windows.iter().map(|w| norm.window(w)).collect::<Result<Vec<_>, _>>()?;
    // Windows spanning a gap are skipped upstream; those steps stay flat.
    let first = cfg.features.window - 1;
    let mut positions = vec![Position::Flat; returns.len()];
    for w in &windows {
        let e = w.end_index();
        if e >= first && e - first < positions.len() {
            let z = net.predict(w.matrix.view(), &[]).context(|| "predicting".into())?;
            positions[e - first] = Position::from_index(argmax(z.as_slice().expect("contiguous"))).context(|| "decoding".into())?;
        }
    }
    Ok(positions)
}

pub fn backtest(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    baselines: &[Baseline],
) -> Result<BacktestSummary, CliError> {
    let dir = command_dir(cfg, "backtest")?;
    let data = load_dataset(cfg)?;
    let test = data.splits.test();
    let window = cfg.features.window;
    let commission = cfg.env.commission;
    let returns = test_returns(test, window);
    if returns.is_empty() {
        return Err(CliError::Config(vec![format!(
            "test partition has {} candles, too few for windows of {window}",
            test.series.len()
        )]));
    }
    // Without explicit checkpoints the trained default is used; alongside
    // baselines only if it exists.
    let paths: Vec<PathBuf> = match (checkpoints.is_empty(), baselines.is_empty()) {
        (false, _) => checkpoints.to_vec(),
        (true, true) => default_checkpoints(cfg),
        (true, false) => default_checkpoints(cfg).into_iter().filter(|p| p.exists()).collect(),
    };
    let mut rows = Vec::new();
    let mut names = std::collections::BTreeSet::new();
    for path in &paths {
        let ckpt = Checkpoint::load(path).context(|| format!("loading checkpoint {}", path.display()))?;
        let prov = check_provenance(path, &ckpt, test, data.feature_cols, window)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("checkpoint").to_string();
        let mut name = stem.clone();
        let mut k = 2;
        while !names.insert(name.clone()) {
            name = format!("{stem}_{k}");
            k += 1;
        }
        let report = match ckpt.kind.as_str() {
            CLASSIFIER_KIND => {
                let net = Network::from_checkpoint(&ckpt).context(|| format!("restoring {}", path.display()))?;
                let positions = classifier_positions(cfg, &net, test, &prov.normalizer, &returns)?;
                backtest_input(&BacktestInput::new(returns.clone(), positions, commission), cfg.backtest.risk_free)
                    .context(|| "backtest".into())?
            }
            POLICY_KIND => {
                let policy = PolicyNetwork::from_checkpoint(&ckpt).context(|| format!("restoring {}", path.display()))?;
                let env_cfg = prov.env.clone().unwrap_or_else(|| cfg.env.clone());
                let mut env = make_env(test, &prov.normalizer, &env_cfg)?;
                let episode = evaluate_greedy(&policy, &mut env).context(|| "greedy evaluation".into())?;
                episode
                    .write_csv(dir.join(format!("{name}_episode.csv")))
                    .context(|| "writing episode".into())?;
                episode_report(&episode, &env.episode_returns(), env_cfg.commission, cfg.backtest.risk_free)?
            }
            other => {
                return Err(CliError::Checkpoint(format!("{}: unknown checkpoint kind `{other}`", path.display())));
            }
        };
        rows.push((name, report));
    }
    for b in baselines {
        let positions = vec![b.position(); returns.len()];
        let report = backtest_input(&BacktestInput::new(returns.clone(), positions, commission), cfg.backtest.risk_free)
            .context(|| "backtest".into())?;
        rows.push((b.name().to_string(), report));
    }
    for (name, report) in &rows {
        write(&dir.join(format!("{name}.json")), report.summary_json(Some(name)).context(|| "report".into())?)?;
        report
            .write_equity_csv(dir.join(format!("{name}_equity.csv")))
            .context(|| "writing equity".into())?;
    }
    if let Some((name, first)) = rows.first() {
        write(&dir.join("report.json"), first.summary_json(Some(name)).context(|| "report".into())?)?;
        write(&dir.join("equity.csv"), first.equity_csv())?;
    }
    let table = comparison_table(&rows);
    if rows.len() > 1 {
        write(&dir.join("comparison.csv"), &table)?;
    }
    Ok(BacktestSummary { rows, table })
}

fn episode_report(episode: &Episode, returns: &[f64], commission: f64, risk_free: f64) -> Result<BacktestReport, CliError> {
    backtest_input(&BacktestInput::new(returns.to_vec(), episode.actions(), commission), risk_free)
        .context(|| "backtest".into())
}

// ---------------------------------------------------------------------------
// report

/// Markdown digest of the last training epoch and every backtest summary.
pub fn report(cfg: &ExperimentConfig) -> Result<String, CliError> {
    let mode = serde_json::to_value(cfg.training.mode).ok();
    let mode = mode.as_ref().and_then(|v| v.as_str()).unwrap_or("unknown");
    let mut out = format!("# {} ({mode}, seed {})\n\n", cfg.data.asset_id, cfg.seed);
    let metrics = cfg.output_dir.join("train").join("metrics.csv");
    if let Ok(text) = fs::read_to_string(&metrics) {
        let mut lines = text.lines();
        if let (Some(header), Some(last)) = (lines.next(), text.lines().last()) {
            if last != header {
                out.push_str("## Training (last row)\n\n");
                out.push_str(&markdown_row(header));
                out.push_str(&markdown_rule(header));
                out.push_str(&markdown_row(last));
                out.push('\n');
            }
        }
    }
    let dir = cfg.output_dir.join("backtest");
    let mut summaries = Vec::new();
    if let Ok(entries) = fs::read_dir(&dir) {
        for entry in entries.flatten() {
            let path = entry.path();
            let is_summary = path.extension().is_some_and(|e| e == "json") && path.file_stem().is_some_and(|s| s != "report");
            if is_summary {
                let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
                let v: serde_json::Value = serde_json::from_str(&text)
                    .map_err(|e| CliError::Checkpoint(format!("{}: {e}", path.display())))?;
                summaries.push(v);
            }
        }
    }
    summaries.sort_by(|a, b| a["label"].as_str().cmp(&b["label"].as_str()));
    if !summaries.is_empty() {
        let header = "name,pnl,sharpe,max_drawdown,n_trades,final_equity";
        out.push_str("## Backtests\n\n");
        out.push_str(&markdown_row(header));
        out.push_str(&markdown_rule(header));
        for v in &summaries {
            let field = |k: &str| match &v[k] {
                serde_json::Value::Null => "NA".to_string(),
                serde_json::Value::String(s) => s.clone(),
                other => other.to_string(),
            };
            let row = ["label", "pnl", "sharpe", "max_drawdown", "n_trades", "final_equity"]
                .map(field)
                .join(",");
            out.push_str(&markdown_row(&row));
        }
    }
    let path = cfg.output_dir.join("report.md");
    fs::create_dir_all(&cfg.output_dir).map_err(|e| CliError::io(&cfg.output_dir, e))?;
    write(&path, &out)?;
    Ok(out)
}

fn markdown_row(csv: &str) -> String {
    format!("| {} |\n", csv.split(',').collect::<Vec<_>>().join(" | "))
}

fn markdown_rule(csv: &str) -> String {
    format!("|{}\n", "---|".repeat(csv.split(',').count()))
}
