use std::path::Path;
use std::process::{Command, Output};

fn tte(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tte"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn usage_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let none = tte(dir.path(), &[]);
    assert_eq!(code(&none), 1);
    assert!(String::from_utf8_lossy(&none.stderr).contains("Usage"));
    assert_eq!(code(&tte(dir.path(), &["no-such-command"])), 1);
    assert_eq!(code(&tte(dir.path(), &["pipeline", "--no-such-flag"])), 1);
    assert_eq!(code(&tte(dir.path(), &["--help"])), 0);
    assert_eq!(code(&tte(dir.path(), &["--version"])), 0);
}

#[test]
fn validation_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let bad_key = tte(dir.path(), &["pipeline", "--set", "asr_train.epoch=3"]);
    assert_eq!(code(&bad_key), 1);
    assert!(String::from_utf8_lossy(&bad_key.stderr).contains("asr_train.epoch"));
    assert_eq!(code(&tte(dir.path(), &["pipeline", "--variant", "nonsense"])), 1);
    assert_eq!(code(&tte(dir.path(), &["pipeline", "--jobs", "0"])), 1);
    std::fs::write(dir.path().join("c.json"), r#"{"extra": true}"#).unwrap();
    assert_eq!(code(&tte(dir.path(), &["--config", "c.json", "pipeline"])), 1);
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = tte(dir.path(), &["decode", "missing.ckpt", "missing.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error:"));
}

#[test]
fn score_checks_hypothesis_ids() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = tte(
        dir.path(),
        &["make-corpus", "c", "--set", "corpus.paired=4", "--set", "corpus.unpaired=4", "--set", "corpus.valid=3", "--set", "corpus.eval=2"],
    );
    assert_eq!(code(&corpus), 0, "{}", String::from_utf8_lossy(&corpus.stderr));
    let manifest = std::fs::read_to_string(dir.path().join("c/valid.jsonl")).unwrap();
    let entries: Vec<serde_json::Value> = manifest.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let line = |e: &serde_json::Value, hyp: &str| serde_json::json!({"utterance_id": e["id"], "hyp": hyp}).to_string();

    let exact: Vec<String> = entries.iter().map(|e| line(e, e["text"].as_str().unwrap())).collect();
    std::fs::write(dir.path().join("h.jsonl"), exact.join("\n")).unwrap();
    let o = tte(dir.path(), &["score", "c/valid.jsonl", "h.jsonl"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(summary["cer"], 0.0);
    assert_eq!(summary["wer"], 0.0);

    std::fs::write(dir.path().join("short.jsonl"), exact[1..].join("\n")).unwrap();
    assert_eq!(code(&tte(dir.path(), &["score", "c/valid.jsonl", "short.jsonl"])), 1);
    let dup = [exact.clone(), vec![exact[0].clone()]].concat();
    std::fs::write(dir.path().join("dup.jsonl"), dup.join("\n")).unwrap();
    assert_eq!(code(&tte(dir.path(), &["score", "c/valid.jsonl", "dup.jsonl"])), 1);
}
