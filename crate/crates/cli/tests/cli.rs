//! End-to-end runs of the `gift` binary.

use std::path::Path;
use std::process::{Command, Output};

fn gift(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gift"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn gift")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

const TINY: &str = r#"
epochs = 4
[dataset]
classes = 4
per_class = 10
test_per_class = 5
dim = 5
ipc = 3
[teacher]
hidden = [8]
epochs = 3
[student]
hidden = [8]
"#;

fn tiny_config(dir: &Path) -> String {
    let path = dir.join("tiny.toml");
    std::fs::write(&path, TINY).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn gradcheck_passes_every_loss() {
    let o = gift(&["gradcheck", "--instances", "5"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("PASS")).count(), 11, "{out}");
}

#[test]
fn check_bounds_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bounds.csv");
    let o = gift(&["check-bounds", "--k", "8", "--trials", "20", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("K,tau,infonce,jensen_bound,approx_bound,gap_jensen,gap_approx"));
    assert_eq!(text.lines().count(), 21);
}

#[test]
fn run_sweep_and_gdumb_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let out_s = out.to_str().unwrap();

    let o = gift(&["run", &cfg, "--out", out_s, "--set", "loss=kl"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("results.csv").exists());

    let o = gift(&["sweep", &cfg, "--out", out_s, "--axis", "loss=ce,cosine", "--axis", "seed=0,1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("Best `loss.id`"));
    let rows = std::fs::read_to_string(out.join("results.csv")).unwrap().lines().count();
    assert_eq!(rows, 1 + 4 + 2);

    let o = gift(&["gdumb", &cfg, "--steps", "2", "--out", out_s]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("memory 12"));
    assert!(out.join("gdumb.csv").exists());
}

#[test]
fn bad_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    for args in [
        vec!["run", cfg.as_str(), "--set", "no.such.key=1"],
        vec!["run", cfg.as_str(), "--set", "loss=kl", "--set", "labels.source=teacher_logits"],
        vec!["gdumb", cfg.as_str(), "--steps", "3"],
        vec!["run", "/nonexistent/config.toml"],
    ] {
        let o = gift(&args);
        assert!(!o.status.success(), "{args:?} should fail");
        assert!(String::from_utf8_lossy(&o.stderr).contains("error"), "{args:?}");
    }
}
