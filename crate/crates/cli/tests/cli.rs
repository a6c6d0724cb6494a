use std::path::Path;
use std::process::{Command, Output};

fn qta(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_qta"));
    cmd.args(args).env_remove("QTA_THREADS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn small_data(root: &Path) -> String {
    let cfg = root.join("small.json");
    std::fs::write(&cfg, r#"{"data": {"samples_per_type": 30}}"#).unwrap();
    let data = root.join("data");
    let o = qta(&["gen-data", "--config", cfg.to_str().unwrap(), "--out", data.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    data.to_str().unwrap().to_string()
}

#[test]
fn check_suites_pass_and_report() {
    let o = qta(&["check", "--suite", "mcb-oracle"], &[]);
    assert_eq!(code(&o), 0);
    let out = String::from_utf8_lossy(&o.stdout);
    assert!(out.contains("suite mcb-oracle passed"), "{out}");
    for suite in ["sketch", "fft", "grad"] {
        assert_eq!(code(&qta(&["check", "--suite", suite], &[])), 0, "{suite}");
    }
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(code(&qta(&["check", "--suite", "nope"], &[])), 1);
    assert_eq!(code(&qta(&["train"], &[])), 1);
    assert_eq!(code(&qta(&["frobnicate"], &[])), 1);
    assert_eq!(code(&qta(&["check", "--suite", "fft"], &[("QTA_THREADS", "many")])), 1);

    let bad_cfg = tmp.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"modle": {}}"#).unwrap();
    let o = qta(&["gen-data", "--config", bad_cfg.to_str().unwrap(), "--out", "unused"], &[]);
    assert_eq!(code(&o), 1);

    let missing = tmp.path().join("missing.qtac");
    let o = qta(
        &["eval", "--checkpoint", missing.to_str().unwrap(), "--data", ".", "--report", "r"],
        &[],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("does not exist"));

    // A finite-difference step of 1 cannot resolve the curvature of the ops.
    assert_eq!(code(&qta(&["check", "--suite", "grad", "--eps", "1"], &[])), 3);
}

#[test]
fn untrained_model_guesses_uniformly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    let o = qta(
        &["train", "--data", &data, "--out", run.to_str().unwrap(), "--epochs", "1", "--lr", "0"],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report = tmp.path().join("report");
    let ckpt = run.join("model.qtac");
    let o = qta(
        &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--report", report.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 0);
    let r: serde_json::Value = serde_json::from_slice(&std::fs::read(report.join("eval_report.json")).unwrap()).unwrap();
    let acc = r["overall_acc"].as_f64().unwrap();
    // 24 answers: uniform guessing is about 4%.
    assert!(acc < 15.0, "{acc}");
    assert!(!report.join("confusion.json").exists());
    assert!(report.join("run_config.json").exists());
}

#[test]
fn thread_count_does_not_change_results() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let mut reports = Vec::new();
    for threads in ["1", "3"] {
        let run = tmp.path().join(format!("run{threads}"));
        let o = qta(
            &["train", "--data", &data, "--out", run.to_str().unwrap(), "--epochs", "2", "--arch", "CATL-QTA-M", "--threads", threads],
            &[],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        let report = tmp.path().join(format!("report{threads}"));
        let ckpt = run.join("model.qtac");
        let o = qta(
            &["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--report", report.to_str().unwrap()],
            &[("QTA_THREADS", threads)],
        );
        assert_eq!(code(&o), 0);
        reports.push((
            std::fs::read(run.join("model.qtac")).unwrap(),
            std::fs::read(report.join("eval_report.json")).unwrap(),
            std::fs::read(report.join("confusion.json")).unwrap(),
        ));
    }
    assert!(reports[0] == reports[1]);
}

#[test]
fn resolved_config_reruns_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let first = tmp.path().join("first");
    let o = qta(&["train", "--data", &data, "--out", first.to_str().unwrap(), "--epochs", "1"], &[]);
    assert_eq!(code(&o), 0);
    let resolved = first.join("run_config.json");
    let second = tmp.path().join("second");
    let o = qta(
        &["train", "--config", resolved.to_str().unwrap(), "--data", &data, "--out", second.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["model.qtac", "loss_curve.csv"] {
        assert_eq!(std::fs::read(first.join(f)).unwrap(), std::fs::read(second.join(f)).unwrap(), "{f}");
    }
    let curve = std::fs::read_to_string(first.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,loss\n1,"));
}

#[test]
fn norms_need_a_gated_model() {
    let tmp = tempfile::tempdir().unwrap();
    let data = small_data(tmp.path());
    let run = tmp.path().join("run");
    qta(&["train", "--data", &data, "--out", run.to_str().unwrap(), "--epochs", "1", "--arch", "CATL"], &[]);
    let ckpt = run.join("model.qtac");
    let out = tmp.path().join("n.csv");
    let o = qta(&["norms", "--checkpoint", ckpt.to_str().unwrap(), "--data", &data, "--out", out.to_str().unwrap()], &[]);
    assert_eq!(code(&o), 1);
}
