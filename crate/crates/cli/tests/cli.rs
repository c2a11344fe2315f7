use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command as Process;

use clap::Parser;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;
use tradelab_cli::{run, Cli, CliError};

fn write_candles(path: &Path, n: usize, seed: u64, start: i64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = String::from("timestamp,open,high,low,close,volume\n");
    let mut close: f64 = 100.0;
    for i in 0..n {
        let open = close;
        close *= 1.0 + rng.random_range(-0.004..0.0045);
        let (hi, lo) = (open.max(close) * 1.001, open.min(close) * 0.999);
        out.push_str(&format!("{},{open},{hi},{lo},{close},{}\n", start + 60 * i as i64, rng.random_range(1.0..50.0)));
    }
    fs::write(path, out).unwrap();
}

const BASE: &str = r#"
schema_version = 1
seed = 3
output_dir = "out"

[data]
candles = "candles.csv"

[features]
window = 8

[model]
hidden = [8]

[training.supervised]
epochs = 2
batch_size = 32

[training.rl]
iterations = 2
rollout_len = 128
minibatch_size = 32

[training.rl.ddqn]
total_steps = 300
learning_starts = 50
epsilon_decay_steps = 200
target_sync = 50

[training.distill]
teachers = 2
epochs = 2
"#;

struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_candles(&dir.path().join("candles.csv"), 400, 11, 0);
        Fixture { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    /// Writes `BASE` with `mode` plus any extra TOML, returning the path.
    fn config(&self, name: &str, mode: &str, extra: &str) -> PathBuf {
        let text = format!("{BASE}\n[training]\nmode = \"{mode}\"\n{extra}");
        let p = self.path(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn run(&self, config: &Path, args: &[&str]) -> Result<String, CliError> {
        let mut argv = vec!["tradelab", "--config", config.to_str().unwrap()];
        argv.extend_from_slice(args);
        run(&Cli::try_parse_from(argv).unwrap())
    }
}

fn checkpoints(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    names
}

#[test]
fn okd_writes_every_teacher_and_the_student() {
    let f = Fixture::new();
    let cfg = f.config("okd.toml", "okd", "");
    f.run(&cfg, &["train"]).unwrap();
    let train = f.path("out/train");
    assert_eq!(
        checkpoints(&train.join("checkpoints")),
        ["student.json", "teacher_1.json", "teacher_2.json", "teacher_3.json"]
    );
    assert!(train.join("config.toml").exists());
    let metrics = fs::read_to_string(train.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() > 1);
    let log = fs::read_to_string(train.join("access_log.json")).unwrap();
    assert!(log.contains("train") && !log.contains("test"), "{log}");
}

#[test]
fn invalid_mode_fails_before_writing_anything() {
    let f = Fixture::new();
    let cfg = f.config("bad.toml", "genetic", "");
    let err = f.run(&cfg, &["train"]).unwrap_err();
    assert!(matches!(err, CliError::Config(_)));
    assert!(err.to_string().contains("genetic"), "{err}");
    assert!(!f.path("out").exists());
}

#[test]
fn binary_reports_missing_file_as_json_on_stderr() {
    let f = Fixture::new();
    let cfg = f.path("missing.toml");
    fs::write(&cfg, BASE.replace("candles.csv", "nowhere.csv") + "\n[training]\nmode = \"supervised\"\n").unwrap();
    let out = Process::new(env!("CARGO_BIN_EXE_tradelab"))
        .args(["--config", cfg.to_str().unwrap(), "ingest"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let v: serde_json::Value = serde_json::from_str(stderr.trim()).unwrap();
    assert_eq!(v["error"]["kind"], "config");
    assert!(v["error"]["message"].as_str().unwrap().contains("nowhere.csv"), "{stderr}");
}

#[test]
fn ingest_summarizes_data_and_warns_on_disjoint_sentiment() {
    let f = Fixture::new();
    fs::write(f.path("news.csv"), "timestamp,positive,negative,source\n900000,0.7,0.1,wire\n").unwrap();
    let cfg = f.config("ingest.toml", "supervised", "");
    let text = fs::read_to_string(&cfg).unwrap().replace(
        "candles = \"candles.csv\"",
        "candles = \"candles.csv\"\nsentiment = \"news.csv\"",
    );
    fs::write(&cfg, text).unwrap();
    f.run(&cfg, &["ingest"]).unwrap();
    let s: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("out/ingest/summary.json")).unwrap()).unwrap();
    assert_eq!(s["candles"], 400);
    assert_eq!(s["split"], serde_json::json!([280, 60, 60]));
    let warnings = s["warnings"].as_array().unwrap();
    assert!(warnings.iter().any(|w| w.as_str().unwrap().contains("do not overlap")), "{warnings:?}");
}

#[test]
fn flat_baseline_earns_nothing() {
    let f = Fixture::new();
    let cfg = f.config("flat.toml", "supervised", "[env]\ncommission = 0.001\n");
    f.run(&cfg, &["backtest", "--baseline", "flat"]).unwrap();
    let r: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(f.path("out/backtest/baseline_flat.json")).unwrap()).unwrap();
    assert_eq!(r["pnl"], 0.0);
    assert_eq!(r["n_trades"], 0);
    assert!(f.path("out/backtest/baseline_flat_equity.csv").exists());
}

#[test]
fn two_checkpoints_give_a_two_row_comparison() {
    let f = Fixture::new();
    let cfg = f.config("okd.toml", "okd", "");
    f.run(&cfg, &["train"]).unwrap();
    let ck = f.path("out/train/checkpoints");
    let (a, b) = (ck.join("teacher_1.json"), ck.join("student.json"));
    let table = f
        .run(&cfg, &["backtest", "--checkpoint", a.to_str().unwrap(), "--checkpoint", b.to_str().unwrap()])
        .unwrap();
    let csv = fs::read_to_string(f.path("out/backtest/comparison.csv")).unwrap();
    assert_eq!(csv, table);
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 3, "{csv}");
    assert!(rows[1].starts_with("teacher_1,") && rows[2].starts_with("student,"));

    let report = f.run(&cfg, &["report"]).unwrap();
    assert!(report.contains("| student |") && report.contains("| teacher_1 |"), "{report}");
    assert!(f.path("out/report.md").exists());
}

#[test]
fn feature_mismatch_names_both_widths() {
    let f = Fixture::new();
    let cfg = f.config("sup.toml", "supervised", "");
    f.run(&cfg, &["train"]).unwrap();
    let narrow = f.path("narrow.toml");
    let text = fs::read_to_string(&cfg).unwrap().replace("window = 8", "window = 8\nrecipe = [\"return\", \"range\"]");
    fs::write(&narrow, text).unwrap();
    let err = f.run(&narrow, &["backtest"]).unwrap_err().to_string();
    assert!(err.contains('4') && err.contains('2'), "{err}");
    assert!(err.contains("feature columns"), "{err}");
}

#[test]
fn test_split_overlapping_training_data_is_refused() {
    let f = Fixture::new();
    let cfg = f.config("sup.toml", "supervised", "");
    f.run(&cfg, &["train"]).unwrap();
    let wide = f.path("wide.toml");
    let text = fs::read_to_string(&cfg)
        .unwrap()
        .replace("candles = \"candles.csv\"", "candles = \"candles.csv\"\nsplit = [0.5, 0.25, 0.25]");
    fs::write(&wide, text).unwrap();
    let err = f.run(&wide, &["backtest"]).unwrap_err();
    assert!(matches!(err, CliError::Overlap(_)), "{err}");
}

#[test]
fn rl_modes_train_and_backtest_end_to_end() {
    for mode in ["ppo", "ddqn", "distill"] {
        let f = Fixture::new();
        let cfg = f.config("rl.toml", mode, "[env]\nreward_kind = \"pnl_trailing\"\ncommission = 0.0005\n");
        f.run(&cfg, &["train"]).unwrap();
        f.run(&cfg, &["backtest", "--baseline", "long"]).unwrap();
        let out = f.path("out/backtest");
        let name = if mode == "distill" { "student" } else { "policy" };
        let episode = fs::read_to_string(out.join(format!("{name}_episode.csv"))).unwrap();
        assert!(episode.starts_with("step,timestamp,action"));
        assert!(out.join("comparison.csv").exists());
        if mode == "distill" {
            assert_eq!(
                checkpoints(&f.path("out/train/checkpoints")),
                ["student.json", "teacher_1.json", "teacher_2.json"]
            );
        }
    }
}

#[test]
fn seed_flag_overrides_the_config() {
    let f = Fixture::new();
    let cfg = f.config("sup.toml", "supervised", "");
    f.run(&cfg, &["--seed", "9", "--out", f.path("o9").to_str().unwrap(), "train"]).unwrap();
    let written = fs::read_to_string(f.path("o9/train/config.toml")).unwrap();
    assert!(written.contains("seed = 9"), "{written}");
}
