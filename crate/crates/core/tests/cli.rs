//! End-to-end runs of the `hintnet` binary on a small synthetic world.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use hintnet::eval::Metrics;

const SMALL: &str = "\
grid.rows = 16
grid.cols = 16
grid.num_days = 90
split.test_fraction = 0.2
mrsp.gamma = 4
mrsp.eta = 400
features.n_spectral = 4
train.w = 3
train.h = 4
train.h_l = 4
train.s_d = 4
train.lstm_input = 4
train.epochs = 2
train.patience = 2
train.samples_per_epoch = 64
train.max_val_samples = 64
";

fn setup() -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.cfg");
    std::fs::write(&cfg, format!("out = {}\n{SMALL}", dir.path().join("out").display())).unwrap();
    (dir, cfg)
}

fn hintnet(cfg: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hintnet")).arg("--config").arg(cfg).args(args).output().unwrap()
}

fn ok(cfg: &Path, args: &[&str]) -> String {
    let out = hintnet(cfg, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn pipeline_produces_metrics_and_report() {
    let (dir, cfg) = setup();
    let out = dir.path().join("out");
    ok(&cfg, &["synth"]);
    ok(&cfg, &["ingest"]);
    ok(&cfg, &["partition", "--levels", "GEOJSON"]);
    assert!(out.join("levelmap.csv").exists() && out.join("levelmap.geojson").exists());
    ok(&cfg, &["train"]);
    ok(&cfg, &["evaluate"]);
    let m: Metrics = serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert!(m.overall_mse.is_finite() && m.ha_overall_mse > 0.0);
    assert_eq!(m.per_level.iter().map(|l| l.cells).sum::<usize>(), m.road_cells);

    let report = ok(&cfg, &["report"]);
    let total: usize = report
        .lines()
        .find_map(|l| l.strip_prefix("total"))
        .map(|t| t.trim().parse().unwrap())
        .unwrap();
    assert_eq!(total, m.road_cells);

    let predicted = ok(&cfg, &["predict", "--dates", "2016-03-25,2016-03-30"]);
    assert!(predicted.contains("2 days"), "{predicted}");
    let csv = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * m.road_cells);

    // a level map that no longer matches the trained pool is refused
    let levels = out.join("levelmap.csv");
    let text = std::fs::read_to_string(&levels).unwrap();
    let edited = if text.starts_with('0') { text.replacen('0', "1", 1) } else { text.replacen(|c: char| c.is_ascii_digit(), "0", 1) };
    std::fs::write(&levels, edited).unwrap();
    let refused = hintnet(&cfg, &["predict"]);
    assert!(!refused.status.success());
    assert!(String::from_utf8_lossy(&refused.stderr).starts_with("error:"));
}

#[test]
fn stages_out_of_order_fail_cleanly() {
    let (_dir, cfg) = setup();
    let out = hintnet(&cfg, &["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "train.epochs = 3\ntrain.epoch = 4\n").unwrap();
    let out = hintnet(&cfg, &["report"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 2"), "{}", String::from_utf8_lossy(&out.stderr));
}
