use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn golomb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_golomb"))
        .args(args)
        .env("GOLOMB_THREADS", "1")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = golomb(args);
    assert!(out.status.success(), "golomb {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

/// A small synthetic dataset: `train/` and `dev/` split directories.
fn synth(root: &Path) -> PathBuf {
    let data = root.join("data");
    ok(&["synth", "--out", s(&data), "--synth.dialogues_per_service", "4", "--synth.num_services", "2"]);
    data
}

const TINY: [&str; 14] = [
    "--encoder.num_layers",
    "1",
    "--encoder.hidden_size",
    "8",
    "--encoder.num_heads",
    "2",
    "--encoder.ffn_size",
    "16",
    "--train.epochs",
    "1",
    "--train.grad_accum_steps",
    "1",
    "--train.learning_rate",
    "1e-3",
];

fn train_tiny(data: &Path, model: &Path) {
    let (train, dev) = (data.join("train"), data.join("dev"));
    let mut args = vec!["train", "--train-dir", s(&train), "--dev-dir", s(&dev), "--model-dir", s(model)];
    args.extend(TINY);
    ok(&args);
}

#[test]
fn gold_predictions_score_perfectly() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let dev = data.join("dev");
    let report = tmp.path().join("out/report.json");
    let text = ok(&["eval", "--data-dir", s(&dev), "--predictions", s(&dev), "--report", s(&report)]);
    assert!(text.contains("joint"), "{text}");
    let r = read_json(&report);
    for key in [
        "active_intent_accuracy",
        "requested_slots_f1",
        "average_goal_accuracy",
        "joint_goal_accuracy_fuzzy",
        "joint_goal_accuracy_strict",
    ] {
        assert_eq!(r[key], 1.0, "{key}");
    }
    // the effective config is echoed next to the report
    assert!(tmp.path().join("out/run_config.json").is_file());
}

#[test]
fn training_is_reproducible_and_tracking_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let data = synth(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    train_tiny(&data, &a);
    train_tiny(&data, &b);
    for f in
        ["final/manifest.json", "best/manifest.json", "vocab.txt", "run_config.json", "meta.json", "train_log.jsonl"]
    {
        assert!(a.join(f).is_file(), "{f}");
    }
    let blobs = |dir: &Path| -> Vec<(PathBuf, Vec<u8>)> {
        let mut v: Vec<_> = std::fs::read_dir(dir.join("final"))
            .unwrap()
            .map(|e| {
                let p = e.unwrap().path();
                (p.file_name().unwrap().into(), std::fs::read(&p).unwrap())
            })
            .collect();
        v.sort();
        v
    };
    assert_eq!(blobs(&a), blobs(&b), "same seed, different checkpoints");

    let dev = data.join("dev");
    let predicted = tmp.path().join("pred/dev.json");
    ok(&["track", "--data-dir", s(&dev), "--model-dir", s(&a), "--out", s(&predicted)]);
    let direct = tmp.path().join("direct.json");
    let via_dump = tmp.path().join("via_dump.json");
    ok(&["eval", "--data-dir", s(&dev), "--model-dir", s(&a), "--report", s(&direct)]);
    ok(&[
        "eval",
        "--data-dir",
        s(&dev),
        "--model-dir",
        s(&a),
        "--predictions",
        s(&predicted),
        "--report",
        s(&via_dump),
    ]);
    assert_eq!(read_json(&direct), read_json(&via_dump));
}

#[test]
fn config_file_and_overrides_compose() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("run.json");
    std::fs::write(&cfg, r#"{"synth": {"dialogues_per_service": 3, "num_services": 1}}"#).unwrap();
    let out = tmp.path().join("data");
    ok(&["synth", "--config", s(&cfg), "--out", s(&out), "--synth.seed=4"]);
    let echoed = read_json(&out.join("run_config.json"));
    assert_eq!(echoed["synth"]["dialogues_per_service"], 3);
    assert_eq!(echoed["synth"]["seed"], 4);
}

#[test]
fn exit_codes_separate_usage_from_data_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing");
    let code = |args: &[&str]| golomb(args).status.code();

    assert_eq!(code(&["--help"]), Some(0));
    assert_eq!(code(&["frobnicate"]), Some(1));
    assert_eq!(code(&["synth", "--out", s(&missing), "--train.lr", "1"]), Some(1));
    assert_eq!(code(&["synth", "--out", s(&missing), "--train.learning_rate"]), Some(1));
    assert_eq!(code(&["synth", "--config", s(&missing.join("c.json"))]), Some(1));
    assert_eq!(code(&["synth"]), Some(1));
    assert_eq!(code(&["eval", "--data-dir", s(&missing), "--predictions", s(&missing)]), Some(2));

    let dev = synth(tmp.path()).join("dev");
    assert_eq!(code(&["eval", "--data-dir", s(&dev), "--model-dir", s(&missing)]), Some(2));
    let broken = tmp.path().join("broken");
    std::fs::create_dir_all(&broken).unwrap();
    std::fs::write(broken.join("schema.json"), "[{").unwrap();
    std::fs::write(broken.join("dialogues_001.json"), "[]").unwrap();
    let out = golomb(&["eval", "--data-dir", s(&broken), "--predictions", s(&broken)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("schema.json"));
}
