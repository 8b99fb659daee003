//! End-to-end runs of the installed binary: training reproducibility,
//! store arbitration, scenario exit codes, and evidence checking.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_refdel"))
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn line_value<'a>(text: &'a str, key: &str) -> &'a str {
    text.lines()
        .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(" = ")))
        .unwrap_or_else(|| panic!("no `{key}` line in:\n{text}"))
}

#[test]
fn training_is_reproducible_across_worker_counts() {
    let dir = tempfile::tempdir().unwrap();
    let program = fixtures().join("programs/mlp_tiny.toml");
    let run = |store: &str, workers: &str| {
        let out = bin()
            .args(["train"])
            .arg(&program)
            .arg("--out")
            .arg(dir.path().join(store))
            .args(["--workers", workers])
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        stdout(&out)
    };
    let first = run("a", "1");
    let second = run("b", "3");
    assert_eq!(line_value(&first, "commitment"), line_value(&second, "commitment"));
    assert_eq!(line_value(&first, "checkpoints"), "5");
}

#[test]
fn dispute_flags_a_tampered_store() {
    let dir = tempfile::tempdir().unwrap();
    let program = fixtures().join("programs/mlp_tiny.toml");
    for store in ["a", "b"] {
        let out = bin()
            .args(["train"])
            .arg(&program)
            .arg("--out")
            .arg(dir.path().join(store))
            .output()
            .unwrap();
        assert!(out.status.success());
    }

    // honest stores agree
    let evidence = dir.path().join("evidence.bin");
    let dispute = |ev: &Path| {
        bin()
            .args(["dispute", "--program"])
            .arg(&program)
            .arg("--a")
            .arg(dir.path().join("a"))
            .arg("--b")
            .arg(dir.path().join("b"))
            .arg("--evidence")
            .arg(ev)
            .output()
            .unwrap()
    };
    let out = dispute(&evidence);
    assert!(out.status.success());
    assert_eq!(line_value(&stdout(&out), "outcome"), "no_dispute");

    // flip one root byte of b's final commitment; its own stored trace
    // then contradicts the claim
    let commit = dir.path().join("b/step_8/commit.hex");
    let mut bytes = hex::decode(std::fs::read_to_string(&commit).unwrap().trim()).unwrap();
    bytes[8] ^= 0x5a;
    std::fs::write(&commit, hex::encode(bytes)).unwrap();

    let out = dispute(&evidence);
    assert!(out.status.success());
    let text = stdout(&out);
    assert_eq!(line_value(&text, "outcome"), "fraud_proven");
    assert_eq!(line_value(&text, "accepted_parties"), "a");
    assert!(text.contains("conviction.0 = b:"), "{text}");
    assert_eq!(line_value(&text, "evidence"), "verified");

    let out = bin().arg("verify-evidence").arg(&evidence).output().unwrap();
    assert!(out.status.success());
    assert_eq!(line_value(&stdout(&out), "outcome"), "fraud_proven");
}

#[test]
fn scenario_exit_codes_follow_the_expectation() {
    let dir = tempfile::tempdir().unwrap();
    let evidence = dir.path().join("evidence.bin");
    let out = bin()
        .args(["scenario", "run"])
        .arg(fixtures().join("scenarios/wrong_matmul_output.cfg"))
        .arg("--evidence")
        .arg(&evidence)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).ends_with("expect = ok\n"));

    // same staged dispute, wrong declared expectation
    let model = fixtures().join("models/mlp_small.model").canonicalize().unwrap();
    let cfg = format!(
        r#"
[program]
model = "{}"
steps = 12
batch_size = 8
schedule = [4]
seed = 102
optimizer = {{ kind = "adam", lr = 0.005 }}
dataset = {{ rows = 48, features = 16, classes = 4 }}

[[trainers]]
name = "a"

[[trainers]]
name = "b"

[trainers.fault]
kind = "wrong_output_tensor"
step = 7
node = "out"

[expect]
outcome = "no_dispute"
"#,
        model.display()
    );
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, cfg).unwrap();
    let out = bin().args(["scenario", "run"]).arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).contains("expect = failed: outcome"));

    // recorded evidence verifies; a flipped byte does not
    let out = bin().arg("verify-evidence").arg(&evidence).output().unwrap();
    assert!(out.status.success());
    let mut bytes = std::fs::read(&evidence).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    let bad_ev = dir.path().join("bad.bin");
    std::fs::write(&bad_ev, bytes).unwrap();
    let out = bin().arg("verify-evidence").arg(&bad_ev).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stdout(&out).starts_with("evidence = invalid"));
}

#[test]
fn bench_digest_is_stable() {
    let run = || {
        let out = bin()
            .args(["bench", "detops", "--op", "matmul", "--dims", "32x16x8", "--iters", "1"])
            .output()
            .unwrap();
        assert!(out.status.success());
        line_value(&stdout(&out), "output_digest").to_string()
    };
    assert_eq!(run(), run());
}
