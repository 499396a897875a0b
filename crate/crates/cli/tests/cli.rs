use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn grcgan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grcgan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_manifest(dir: &Path, body: &str) -> String {
    let p = dir.join("m.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const TINY_CIRCULAR: &str = r#"
version = 1
experiment = "circular-full"
seed = 3
repetitions = 1
variants = ["gr-exact"]

[eval]
n_angles = 8
n_per_label = 10
mvn_labels = 100
mvn_per_label = 250

[overrides]
iterations = 5
batch_size = 16
"#;

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        let o = grcgan(&["gen-data", "circular-partial", "--seed", "9", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["data.csv", "labels.csv", "data_manifest.toml"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
    let data = fs::read_to_string(a.join("data.csv")).unwrap();
    assert_eq!(data.lines().count(), 1 + 1200);

    let c = dir.path().join("c");
    grcgan(&["gen-data", "circular-partial", "--seed", "10", "--out", c.to_str().unwrap()]);
    assert_ne!(fs::read(a.join("data.csv")).unwrap(), fs::read(c.join("data.csv")).unwrap());
}

#[test]
fn gen_data_mvn_writes_the_parameters() {
    let dir = tempfile::tempdir().unwrap();
    let o = grcgan(&["gen-data", "mvn", "--out", dir.path().to_str().unwrap()]);
    assert!(o.status.success());
    let data = fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(data.lines().count(), 1 + 1000);
    assert_eq!(data.lines().next().unwrap().split(',').count(), 10);
    assert!(dir.path().join("mvn_spec.json").exists());
}

#[test]
fn train_then_eval_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_manifest(dir.path(), TINY_CIRCULAR);
    let out = dir.path().join("run");
    let out_s = out.to_str().unwrap();
    let o = grcgan(&["train", "--config", &cfg, "--out", out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let log = fs::read_to_string(out.join("log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 5);
    assert!(log.starts_with("iter,d_loss,g_adv,g_reg,wall_ms"));

    let o = grcgan(&["eval", "--out", out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["report.csv", "samples.csv", "overlay.csv", "summary.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 1 + 8 + 1);
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["experiment"], "circular-full");
}

#[test]
fn reproduce_check_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_manifest(dir.path(), TINY_CIRCULAR);
    let out = dir.path().join("r");
    let out_s = out.to_str().unwrap();

    // five iterations cannot reach the target bands
    let o = grcgan(&["reproduce", "--config", &cfg, "--out", out_s, "--check"]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("[FAIL]"));
    assert!(out.join("circular-full").join("aggregate.csv").exists());

    let o = grcgan(&["reproduce", "--config", &cfg, "--out", out_s]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = grcgan(&["train", "--config", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));

    assert_eq!(grcgan(&["train", "no-such-experiment"]).status.code(), Some(1));
    assert_eq!(grcgan(&["bogus"]).status.code(), Some(1));
    assert_eq!(grcgan(&["train", "--scale", "1.5", "circular-full"]).status.code(), Some(1));

    let cfg = write_manifest(dir.path(), TINY_CIRCULAR);
    assert_eq!(grcgan(&["train", "mvn", "--config", &cfg]).status.code(), Some(1));
    assert_eq!(grcgan(&["--help"]).status.code(), Some(0));
}

#[test]
fn gradcheck_passes_and_detects_corruption() {
    let o = grcgan(&["gradcheck"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().count() >= 13);
    assert!(!text.contains("[FAIL]"));

    let o = grcgan(&["gradcheck", "--corrupt"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!String::from_utf8_lossy(&o.stdout).contains("[PASS]"));
}
