use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn dlfa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dlfa"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A small task in a fresh directory: 12 layers of (64×4×16).
fn task_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("spec.json"),
        r#"{"train_per_language": 48, "test_per_language": 16, "channels": 16, "latent_dim": 8, "tokens_per_sentence": 4}"#,
    )
    .unwrap();
    let o = dlfa(
        dir.path(),
        &["gen-task", "--spec", "spec.json", "--out-src", "en.bank", "--out-tgt", "xx.bank"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    dir
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = dlfa(dir.path(), &["sweep", "--src", "a.bank"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));
    assert_eq!(dlfa(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(dlfa(dir.path(), &["sweep", "--src", "a", "--tgt", "b", "--layers", "0..3", "--report", "r.csv"]).status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_fails_by_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let o = dlfa(dir.path(), &["gradcheck", "--seed", "17", "--eps", "1e-5", "--rtol", "1e-4"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("head.weight"));

    let o = dlfa(dir.path(), &["gradcheck", "--rtol", "1e-14", "--report", "g.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"));
    assert!(stderr(&o).contains("gradient check failed"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("g.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
    // The manifest is still written for a failing check.
    assert!(dir.path().join("g.json.run.json").exists());
}

#[test]
fn sweep_writes_baseline_plus_every_layer() {
    let dir = task_dir();
    let o = dlfa(
        dir.path(),
        &["sweep", "--src", "en.bank", "--tgt", "xx.bank", "--layers", "1..12", "--epochs", "1", "--report", "s.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 14);
    assert!(lines[0].starts_with("config,"));
    assert!(lines[1].starts_with("baseline,"));
    assert!(lines[13].starts_with("D_12,"));
    // The last-layer fusion reproduces the baseline row exactly.
    assert_eq!(lines[1].split_once(',').unwrap().1, lines[13].split_once(',').unwrap().1);
    assert!(stdout(&o).contains("tgt Acc"));
}

#[test]
fn ablate_reports_three_variants_as_json() {
    let dir = task_dir();
    let o = dlfa(
        dir.path(),
        &["ablate", "--src", "en.bank", "--tgt", "xx.bank", "--layer", "6", "--epochs", "1", "--report", "a.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("a.json")).unwrap()).unwrap();
    let ids: Vec<&str> = report["rows"].as_array().unwrap().iter().map(|r| r["config"].as_str().unwrap()).collect();
    assert_eq!(ids, ["baseline", "D_6_G", "D_6_L", "D_6"]);
}

#[test]
fn train_fuse_and_cossim_chain() {
    let dir = task_dir();
    let d = dir.path();
    let o = dlfa(
        d,
        &["train", "--src", "en.bank", "--eval", "xx.bank", "--layer", "5", "--variant", "global", "--epochs", "2", "--out-params", "m.json", "--report", "t.json"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(d.join("t.json")).unwrap()).unwrap();
    assert_eq!(report["config"], "D_5_G");
    // 48 training sentences in batches of 32 and 16, for two epochs.
    assert_eq!(report["loss_curve"].as_array().unwrap().len(), 4);

    let o = dlfa(d, &["fuse", "--bank", "xx.bank", "--layer", "5", "--params", "m.json", "--out", "f.bank"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = dlfa(d, &["inspect-bank", "f.bank", "--json"]);
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["layers"], 1);
    assert_eq!(summary["batch"], 64);

    // Parameters trained for D_5 cannot fuse another layer.
    let o = dlfa(d, &["fuse", "--bank", "xx.bank", "--layer", "4", "--params", "m.json", "--out", "g.bank"]);
    assert_eq!(o.status.code(), Some(1));

    let o = dlfa(
        d,
        &["cossim", "--src", "en.bank", "--tgt", "xx.bank", "--layers", "6,11", "--params", "m.json", "--sentences", "10", "--report", "c.csv"],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = fs::read_to_string(d.join("c.csv")).unwrap();
    for name in ["baseline", "D_6", "D_11", "m"] {
        assert!(csv.lines().any(|l| l.starts_with(&format!("{name},"))), "{name} missing from\n{csv}");
    }
}

#[test]
fn inspect_writes_manifest_only_on_request() {
    let dir = task_dir();
    let d = dir.path();
    let o = dlfa(d, &["inspect-bank", "en.bank"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("12 layers"));
    assert!(!d.join("en.bank.run.json.run.json").exists());
    let o = dlfa(d, &["inspect-bank", "en.bank", "--manifest", "inspect.run.json"]);
    assert!(o.status.success());
    let m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("inspect.run.json")).unwrap()).unwrap();
    assert_eq!(m["subcommand"], "inspect-bank");
    assert_eq!(m["inputs"][0]["path"], "en.bank");
}

#[test]
fn replay_rejects_changed_inputs_and_outputs() {
    let dir = task_dir();
    let d = dir.path();
    let o = dlfa(d, &["fuse", "--bank", "en.bank", "--layer", "3", "--out", "f.bank"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dlfa(d, &["replay", "f.bank.run.json"]).status.success());

    let mut m: serde_json::Value = serde_json::from_slice(&fs::read(d.join("f.bank.run.json")).unwrap()).unwrap();
    m["outputs"][0]["sha256"] = "00".into();
    fs::write(d.join("tampered.json"), serde_json::to_vec(&m).unwrap()).unwrap();
    let o = dlfa(d, &["replay", "tampered.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("replay mismatch"));
    assert!(dlfa(d, &["replay", "tampered.json", "--no-verify"]).status.success());

    let mut bytes = fs::read(d.join("en.bank")).unwrap();
    let n = bytes.len();
    bytes[n - 2] ^= 1;
    fs::write(d.join("en.bank"), bytes).unwrap();
    let o = dlfa(d, &["replay", "f.bank.run.json"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("en.bank changed"));
}

#[test]
fn corrupt_bank_is_reported() {
    let dir = task_dir();
    let d = dir.path();
    let bytes = fs::read(d.join("en.bank")).unwrap();
    fs::write(d.join("short.bank"), &bytes[..bytes.len() / 3]).unwrap();
    let o = dlfa(d, &["inspect-bank", "short.bank"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).to_lowercase().contains("trunc"), "{}", stderr(&o));
    let o = dlfa(d, &["inspect-bank", "missing.bank"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("missing.bank"));
}
