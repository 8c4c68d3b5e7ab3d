use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avsynth"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn make_data(dir: &Path) -> std::path::PathBuf {
    let out = dir.join("data");
    let o = run(&["make-data", "--speakers", "2", "--clips", "2", "--seconds", "0.5", "--sample-rate", "8000", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.join("manifest.jsonl")
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&["train-v2a", "--family", "mel", "--data", s(&dir.path().join("nope.jsonl")), "--out", s(dir.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error[data]"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_data(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "learning_rate": 3}"#).unwrap();
    let o = run(&["train-v2a", "--family", "mel", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn ground_truth_procedure_requires_audio() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_data(dir.path());
    // Keep only the synthesized-audio column.
    let text = std::fs::read_to_string(&manifest).unwrap();
    let rows: Vec<String> = text
        .lines()
        .map(|l| {
            let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
            let audio = v["audio_path"].take();
            v["synth_audio_path"] = audio;
            v.to_string()
        })
        .collect();
    let edited = dir.path().join("data/synth_only.jsonl");
    std::fs::write(&edited, rows.join("\n") + "\n").unwrap();
    let o = run(&[
        "train-av2a",
        "--from-v2a",
        s(&dir.path().join("missing")),
        "--procedure",
        "mdrop-gt",
        "--data",
        s(&edited),
        "--out",
        s(&dir.path().join("o")),
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("audio_path"));
}

#[test]
fn train_inspect_and_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = make_data(dir.path());
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 1}"#).unwrap();
    let ckpt = dir.path().join("v2a");
    let o = run(&["train-v2a", "--family", "mel", "--config", s(&cfg), "--data", s(&manifest), "--out", s(&ckpt), "--max-steps", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(ckpt.join("train_log.json").exists() && ckpt.join("config.json").exists());

    let o = run(&["inspect", "--checkpoint", s(&ckpt)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("v2a") && text.contains("mel"));
    assert!(text.lines().any(|l| l.starts_with("decoder.")));

    let report = |name: &str| {
        let p = dir.path().join(name);
        let o = run(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--split", "all", "--report", s(&p)]);
        assert!(o.status.success(), "{}", stderr(&o));
        std::fs::read(p).unwrap()
    };
    let a = report("a.json");
    assert_eq!(a, report("b.json"));
    let v: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(v["summary"]["clips"], 4);

    let o = run(&["evaluate", "--checkpoint", s(&ckpt), "--data", s(&manifest), "--vocoder", "external", "--report", s(&dir.path().join("c.json"))]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}
