use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn skd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skd")).args(args).env("SKD_DETERMINISTIC", "1").output().expect("spawn skd")
}

fn ok(args: &[&str]) -> String {
    let out = skd(args);
    assert!(out.status.success(), "skd {args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = skd(args);
    assert!(!out.status.success(), "skd {args:?} unexpectedly succeeded");
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(!err.trim().is_empty(), "no diagnostic for {args:?}");
    err
}

/// Writes a small config derived from the built-in defaults.
fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg: serde_json::Value = serde_json::from_str(&ok(&["default-config"])).unwrap();
    for counts in cfg["synth"]["counts"].as_object_mut().unwrap().values_mut() {
        for g in ["cancer", "benign", "normal"] {
            counts[g] = 6.into();
        }
    }
    cfg["synth"]["slices_per_stack"] = serde_json::json!([6, 9]);
    cfg["optimizer"]["total_iterations"] = 20.into();
    cfg["optimizer"]["batch_size"] = 8.into();
    let path = dir.join("tiny.json");
    std::fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn full_workflow() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    let out = ok(&["gen-data", "--config", s(&cfg), "--seed", "4", "--out", s(&data)]);
    assert!(out.contains("dataset sha256"), "{out}");

    let base = tmp.path().join("base");
    ok(&["train", "--setting", "baseline", "--data", s(&data), "--config", s(&cfg), "--seed", "4", "--out", s(&base)]);
    let sel = tmp.path().join("sel");
    let out = ok(&[
        "train", "--setting", "selective-weak", "--data", s(&data), "--config", s(&cfg), "--seed", "4", "--out", s(&sel), "--teacher", s(&base),
    ]);
    assert!(out.contains("SelectiveKD*"), "{out}");
    assert!(!sel.join("teacher").exists(), "a supplied teacher is not retrained");

    let out = ok(&["eval", "--run", s(&sel), "--data", s(&data)]);
    assert!(out.contains("matches stored metrics"), "{out}");

    let csv = tmp.path().join("cmp.csv");
    let out = ok(&["compare", s(&base), s(&sel), "--csv", s(&csv)]);
    assert!(out.contains("Baseline") && out.contains("SelectiveKD*"), "{out}");
    assert!(csv.is_file());
}

#[test]
fn overrides_apply_on_top_of_the_config() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let run = tmp.path().join("kd");
    ok(&["train", "--setting", "kd", "--data", s(&data), "--config", s(&cfg), "--set", "optimizer.total_iterations=5", "--out", s(&run)]);
    let log = std::fs::read_to_string(run.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 1 + 5);
    assert!(run.join("teacher").join("metrics.json").is_file());
}

#[test]
fn deterministic_runs_reproduce_exactly() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "2", "--out", s(&data)]);
    let read = |dir: &Path, f: &str| std::fs::read(dir.join(f)).unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    for dir in [&a, &b] {
        ok(&["train", "--setting", "selective", "--data", s(&data), "--config", s(&cfg), "--seed", "2", "--out", s(dir)]);
    }
    for f in ["selection.jsonl", "train_log.csv", "model.ckpt", "scores_test.csv"] {
        assert_eq!(read(&a, f), read(&b, f), "{f} differs");
    }
}

#[test]
fn small_sweep() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("sweep");
    // domain A alone with enough stacks to subsample
    let counts = r#"synth.counts={"A":{"cancer":25,"benign":25,"normal":25}}"#;
    let shift = r#"synth.domain_shift={"A":{"contrast_gain":1.0,"texture_frequency":0.0,"texture_amplitude":0.0,"noise_sigma":0.0,"blur_sigma":0.0}}"#;
    let stdout = ok(&[
        "sweep", "--config", s(&cfg), "--set", counts, "--set", shift, "--set", "optimizer.total_iterations=5", "--fractions", "0.5,1.0", "--seeds", "1",
        "--out", s(&out),
    ]);
    assert!(stdout.contains("selective-weak"), "{stdout}");
    let rows = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 3);
    assert!(out.join("sweep.svg").is_file());
}

#[test]
fn errors_exit_nonzero_with_a_diagnostic() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let missing = tmp.path().join("missing");
    let err = fails(&["eval", "--run", s(&missing), "--data", s(&missing)]);
    assert!(err.starts_with("error:"), "{err}");
    fails(&["train", "--setting", "bogus", "--data", s(&missing), "--out", s(&missing)]);
    fails(&["gen-data", "--config", s(&cfg), "--set", "optimizer.no_such_key=1", "--out", s(&missing)]);
    fails(&["sweep", "--config", s(&cfg), "--fractions", "0.3,0.1", "--out", s(&missing)]);
    fails(&["compare"]);

    let data = tmp.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    let err = fails(&["gen-data", "--config", s(&cfg), "--out", s(&data)]);
    assert!(err.contains("exists"), "{err}");
    let base = tmp.path().join("base");
    ok(&["train", "--setting", "baseline", "--data", s(&data), "--config", s(&cfg), "--out", s(&base)]);
    fails(&["train", "--setting", "baseline", "--data", s(&data), "--config", s(&cfg), "--out", s(&tmp.path().join("b2")), "--teacher", s(&base)]);
    // a teacher trained on different data is refused
    let other = tmp.path().join("other");
    ok(&["gen-data", "--config", s(&cfg), "--seed", "9", "--out", s(&other)]);
    let err = fails(&["train", "--setting", "kd", "--data", s(&other), "--config", s(&cfg), "--out", s(&tmp.path().join("kd")), "--teacher", s(&base)]);
    assert!(err.starts_with("error:"), "{err}");
}
