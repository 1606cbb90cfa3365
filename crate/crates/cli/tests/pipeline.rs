use std::ffi::OsStr;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use boxcaseg::metrics::MetricsReport;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_boxcaseg"))
}

fn run<S: AsRef<OsStr>>(args: &[S]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok<S: AsRef<OsStr> + std::fmt::Debug>(args: &[S]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn train_args(data: &Path, out: &Path, extra: &[&str]) -> Vec<String> {
    let mut args: Vec<String> = ["train", "--data", s(data), "--out", s(out)].map(String::from).to_vec();
    args.extend(TRAIN_FLAGS.iter().chain(extra).map(|a| a.to_string()));
    args
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset and one short joint run shared by every test.
struct Fixture {
    dir: TempDir,
}

impl Fixture {
    fn data(&self) -> PathBuf {
        self.dir.path().join("data")
    }

    fn run_dir(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    fn checkpoint(&self) -> PathBuf {
        self.run_dir().join("checkpoint.bxt")
    }
}

const TRAIN_FLAGS: &[&str] = &["--epochs", "1", "--widths", "4,8,8,4", "--ratio", "3:2", "--seed", "5"];

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let f = Fixture {
            dir: tempfile::tempdir().unwrap(),
        };
        ok(&[
            "gen-data",
            "--out",
            s(&f.data()),
            "--weak",
            "12",
            "--salient",
            "6",
            "--val",
            "4",
            "--seed",
            "5",
        ]);
        ok(&train_args(&f.data(), &f.run_dir(), &[]));
        f
    })
}

fn weak_manifest() -> PathBuf {
    fixture().data().join("weak").join("manifest.json")
}

fn weak_gt() -> PathBuf {
    fixture().data().join("weak").join("eval").join("manifest.json")
}

fn scratch() -> TempDir {
    tempfile::tempdir().unwrap()
}

#[test]
fn pipeline_report_has_every_field() {
    let f = fixture();
    let log = std::fs::read_to_string(f.run_dir().join("log.jsonl")).unwrap();
    let line: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    for key in [
        "epoch",
        "mean_mil",
        "mean_pix",
        "val_miou_star",
        "val_iou50",
        "val_iou75",
    ] {
        assert!(line[key].is_number(), "log field {key}: {line}");
    }
    let tmp = scratch();
    let proxy = tmp.path().join("proxy");
    ok(&[
        "proxy",
        "--checkpoint",
        s(&f.checkpoint()),
        "--manifest",
        s(&weak_manifest()),
        "--out",
        s(&proxy),
    ]);
    let report_dir = tmp.path().join("report");
    ok(&[
        "eval",
        "--gt",
        s(&weak_gt()),
        "--pred",
        s(&proxy.join("manifest.json")),
        "--out",
        s(&report_dir),
    ]);
    let report: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(report_dir.join("report.json")).unwrap()).unwrap();
    assert!(report.miou_star.is_finite());
    for key in ["25", "50", "70", "75"] {
        assert!(
            report.iou_at[key].is_finite() && report.ap_at[key].is_finite(),
            "threshold {key}"
        );
    }
    assert!(!report.per_class.is_empty());
    let table = std::fs::read_to_string(report_dir.join("report.txt")).unwrap();
    assert!(table.starts_with("class") && table.contains("\nall "));
}

#[test]
fn eval_of_a_manifest_against_itself_is_perfect() {
    let tmp = scratch();
    ok(&[
        "eval",
        "--gt",
        s(&weak_gt()),
        "--pred",
        s(&weak_gt()),
        "--out",
        s(tmp.path()),
    ]);
    let report: MetricsReport =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.miou_star, 1.0);
    assert_eq!(report.iou_at(0.75), 100.0);
    assert_eq!(report.ap_at(0.75), 1.0);
}

#[test]
fn zero_drop_threshold_keeps_every_proxy() {
    let tmp = scratch();
    let f = fixture();
    ok(&[
        "proxy",
        "--checkpoint",
        s(&f.checkpoint()),
        "--manifest",
        s(&weak_manifest()),
        "--out",
        s(tmp.path()),
        "--drop-thresh",
        "0.0",
        "--rle",
    ]);
    let summary: Value =
        serde_json::from_str(&std::fs::read_to_string(tmp.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["drop_rate"], 0.0);
    assert_eq!(summary["ignored"], 0);
    let manifest = std::fs::read_to_string(tmp.path().join("manifest.json")).unwrap();
    assert!(manifest.contains("\"rle\"") && !manifest.contains("mask_file"));
}

#[test]
fn run_config_feeds_back_into_an_identical_run() {
    let f = fixture();
    let tmp = scratch();
    ok(&[
        "train",
        "--config",
        s(&f.run_dir().join("run_config.json")),
        "--out",
        s(tmp.path()),
    ]);
    for file in ["checkpoint.bxt", "log.jsonl", "run_config.json"] {
        assert_eq!(
            std::fs::read(f.run_dir().join(file)).unwrap(),
            std::fs::read(tmp.path().join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn config_files_with_unknown_fields_are_usage_errors() {
    let f = fixture();
    let tmp = scratch();
    let text = std::fs::read_to_string(f.run_dir().join("run_config.json")).unwrap();
    let bad = tmp.path().join("bad.json");
    std::fs::write(&bad, text.replacen("\"momentum\"", "\"momentun\"", 1)).unwrap();
    let out = run(&["train", "--config", s(&bad), "--out", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("momentun"));
}

fn assert_single_line_failure(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    let err = String::from_utf8_lossy(&out.stderr);
    assert_eq!(err.trim_end().lines().count(), 1, "diagnostic spans lines: {err:?}");
}

#[test]
fn exit_codes_separate_usage_data_and_numeric_failures() {
    let tmp = scratch();
    let t = tmp.path();
    assert_single_line_failure(&run(&["train", "--bogus"]), 1);
    assert_single_line_failure(&run(&["proxy", "--checkpoint", "x"]), 1);
    assert_single_line_failure(&run(&["gradcheck", "--eps", "0.5"]), 1);

    let missing = t.join("missing.json");
    assert_single_line_failure(&run(&["eval", "--gt", s(&missing), "--pred", s(&missing)]), 2);
    let garbled = t.join("garbled.json");
    std::fs::write(&garbled, "{\"images\": [ {\"id\": 0, ").unwrap();
    assert_single_line_failure(&run(&["eval", "--gt", s(&garbled), "--pred", s(&garbled)]), 2);
    let f = fixture();
    let not_ckpt = f.run_dir().join("log.jsonl");
    let out = run(&[
        "proxy",
        "--checkpoint",
        s(&not_ckpt),
        "--manifest",
        s(&weak_manifest()),
        "--out",
        s(&t.join("p")),
    ]);
    assert_single_line_failure(&out, 2);

    let out = run(&train_args(&f.data(), &t.join("boom"), &["--lr", "1e300", "--no-val"]));
    assert_single_line_failure(&out, 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("non-finite"));
    assert_single_line_failure(&run(&["gradcheck", "--seeds", "1", "--tolerance", "1e-15"]), 3);
}

#[test]
fn help_lists_every_training_flag() {
    let out = ok(&["train", "--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    for flag in [
        "--data",
        "--weak",
        "--salient",
        "--val",
        "--config",
        "--out",
        "--mode",
        "--ratio",
        "--sampling",
        "--alpha",
        "--lr",
        "--momentum",
        "--weight-decay",
        "--clip-norm",
        "--schedule",
        "--epochs",
        "--patch-size",
        "--widths",
        "--seed",
    ] {
        assert!(help.contains(flag), "{flag} missing from help");
    }
    let out = ok(&["--help"]);
    let help = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-data", "train", "proxy", "eval", "gradcheck"] {
        assert!(help.contains(cmd), "{cmd} missing from help");
    }
}

#[test]
fn gradcheck_passes_on_defaults() {
    let out = ok(&["gradcheck"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.ends_with("pass")).count(), 3, "{text}");
}
