use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_swinbird"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn swinbird")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "swinbird {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

struct Fixture {
    dir: TempDir,
    config: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = TempDir::new().unwrap();
        let config = dir.path().join("smoke.json");
        let cfg = serde_json::json!({
            "preset": "smoke",
            "data": { "root": dir.path().join("data") },
        });
        std::fs::write(&config, cfg.to_string()).unwrap();
        Fixture { dir, config }
    }

    fn path(&self, p: &str) -> PathBuf {
        self.dir.path().join(p)
    }

    fn cfg(&self) -> &str {
        self.config.to_str().unwrap()
    }

    fn synth(&self) {
        ok(&["synth", "--config", self.cfg()]);
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn error_line(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("").to_string()
}

#[test]
fn synth_writes_manifests_and_is_seed_deterministic() {
    let f = Fixture::new();
    let out = ok(&["synth", "--config", f.cfg(), "--seed", "3", "--clutter", "2"]);
    let summary: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["train_images"], 16);
    assert_eq!(summary["val_images"], 8);
    for split in ["train", "val", "clutter"] {
        assert!(f.path(&format!("data/{split}/manifest.json")).exists());
    }
    let first = std::fs::read(f.path("data/train/manifest.json")).unwrap();
    let png = std::fs::read(f.path("data/train/img_000000.png")).unwrap();
    ok(&["synth", "--config", f.cfg(), "--seed", "3"]);
    assert_eq!(first, std::fs::read(f.path("data/train/manifest.json")).unwrap());
    assert_eq!(png, std::fs::read(f.path("data/train/img_000000.png")).unwrap());
    ok(&["synth", "--config", f.cfg(), "--seed", "4"]);
    assert_ne!(first, std::fs::read(f.path("data/train/manifest.json")).unwrap());
}

#[test]
fn train_eval_mine_and_retrain() {
    let f = Fixture::new();
    f.synth();
    let run_dir = f.path("run");
    ok(&["train", "--config", f.cfg(), "--epochs", "1", "--out", s(&run_dir), "--quiet"]);
    for file in ["last.ckpt", "model.ckpt", "metrics.jsonl"] {
        assert!(run_dir.join(file).exists(), "{file}");
    }
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 1);

    // resume continues the same run for one more epoch
    let ck = run_dir.join("last.ckpt");
    ok(&["train", "--config", f.cfg(), "--epochs", "2", "--out", s(&run_dir), "--checkpoint", s(&ck), "--quiet"]);
    let metrics = std::fs::read_to_string(run_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);

    let model = run_dir.join("model.ckpt");
    let eval_dir = f.path("eval");
    let out = ok(&["eval", "--config", f.cfg(), "--checkpoint", s(&model), "--out", s(&eval_dir)]);
    let summary: serde_json::Value = serde_json::from_str(out.trim()).unwrap();
    assert_eq!(summary["n_images"], 8);
    for file in ["report.json", "pr.csv", "detections.jsonl"] {
        assert!(eval_dir.join(file).exists(), "{file}");
    }
    let pr = std::fs::read_to_string(eval_dir.join("pr.csv")).unwrap();
    assert_eq!(pr.lines().next(), Some("iou,recall,precision"));
    assert_eq!(pr.lines().count(), 1 + 10 * 101);

    ok(&["mine-hn", "--config", f.cfg(), "--checkpoint", s(&model)]);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(f.path("data/train/manifest.json")).unwrap()).unwrap();
    assert!(manifest["hard_negatives"].is_array());

    let hn = manifest["hard_negatives"].as_array().unwrap().len();
    let hn_dir = f.path("hn");
    let out = run(&[
        "train", "--config", f.cfg(), "--epochs", "1", "--out", s(&hn_dir), "--checkpoint", s(&model),
        "--hard-negative-rate", "0.3", "--quiet",
    ]);
    if hn == 0 {
        assert_eq!(out.status.code(), Some(2));
        assert!(error_line(&out).starts_with("error kind=usage"));
    } else {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        assert!(hn_dir.join("model.ckpt").exists());
    }

    let plots = f.path("plots");
    ok(&["plot", "--run", s(&run_dir), "--out", s(&plots)]);
    let svg = std::fs::read_to_string(plots.join("loss.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert!(plots.join("loss.csv").exists());
}

#[test]
fn ablate_writes_table_and_chart() {
    let f = Fixture::new();
    f.synth();
    let out_dir = f.path("ablate");
    let md = ok(&["ablate", "--config", f.cfg(), "--epochs", "1", "--windows", "2,3", "--out", s(&out_dir), "--quiet"]);
    assert!(md.contains("| 2 ") && md.contains("| 3 "));
    let csv = std::fs::read_to_string(out_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(out_dir.join("plots/ablation.svg").exists());
    let plots = f.path("plots");
    ok(&["plot", "--ablation", s(&out_dir.join("ablation.csv")), "--out", s(&plots)]);
    assert!(plots.join("ablation.svg").exists());
}

#[test]
fn errors_are_one_parsable_line() {
    let f = Fixture::new();

    let out = run(&["mine-hn", "--config", f.cfg(), "--checkpoint", s(&f.path("missing.ckpt"))]);
    assert_eq!(out.status.code(), Some(2));
    let line = error_line(&out);
    assert!(line.starts_with("error kind=usage message="), "{line}");

    let out = run(&["eval", "--config", f.cfg()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).contains("--checkpoint"));

    let out = run(&["train", "--config", f.cfg(), "--quiet"]);
    assert!(error_line(&out).contains("swinbird synth"));

    let bad = f.path("bad.json");
    std::fs::write(&bad, r#"{"preset": "smoke", "model": {"neck": {"window": 0}}}"#).unwrap();
    let out = run(&["synth", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(error_line(&out).starts_with("error kind=config"), "{}", error_line(&out));

    std::fs::write(&bad, "{ not json").unwrap();
    let out = run(&["synth", "--config", s(&bad)]);
    assert!(error_line(&out).starts_with("error kind=json"), "{}", error_line(&out));
    assert_eq!(String::from_utf8_lossy(&out.stderr).lines().count(), 1);
}

#[test]
fn grad_check_command_passes() {
    let dir = TempDir::new().unwrap();
    let json = dir.path().join("gc.json");
    let out = ok(&["grad-check", "--out", s(&json), "--per-tensor", "2"]);
    assert!(out.lines().all(|l| l.starts_with("PASS")));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), out.lines().count());
}
