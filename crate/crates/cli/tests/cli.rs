use std::path::Path;
use std::process::{Command, Output};

fn emd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_emd"))
        .args(args)
        .output()
        .expect("run emd")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_corpus(dir: &Path) -> String {
    let config = dir.join("syn.json");
    std::fs::write(&config, r#"{"n_train": 6, "n_dev": 2, "n_test": 3, "max_turns": 4}"#).unwrap();
    let out = dir.join("corpus");
    let o = emd(&[
        "gen-corpus",
        "--config",
        config.to_str().unwrap(),
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    out.to_str().unwrap().to_string()
}

fn train_small(corpus: &str, out: &Path) -> Output {
    emd(&[
        "--jobs",
        "2",
        "train",
        "--corpus",
        corpus,
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "2",
        "--dims",
        "8",
        "--batch-size",
        "4",
        "--learning-rate",
        "0.003",
        "--seed",
        "9",
    ])
}

fn digest(ckpt: &Path) -> String {
    let m: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(ckpt.join("manifest.json")).unwrap()).unwrap();
    m["blob_sha256"].as_str().unwrap().to_string()
}

#[test]
fn eval_with_gold_replay_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let json = dir.path().join("report.json");
    let o = emd(&[
        "eval",
        "--corpus",
        &corpus,
        "--oracle",
        "--splits",
        "cold-hot,single-multi",
        "--json",
        json.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    let jga = text.lines().find(|l| l.starts_with("JGA ")).unwrap();
    assert!(jga.contains("1.000"), "{text}");
    assert!(text.contains("JGA cold") && text.contains("JGA multi"));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    assert_eq!(report["jga"], 1.0);
}

#[test]
fn bench_emd_passes_do_not_grow_with_slots() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("bench.csv");
    let o = emd(&["bench-itc", "--dims", "8", "--slots", "10,1000", "--turns", "3", "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(csv).unwrap();
    let rows: Vec<Vec<&str>> = text.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0][1], rows[1][1]);
    assert_eq!(rows[0][2], "10");
    assert_eq!(rows[1][2], "1000");
}

#[test]
fn training_twice_gives_the_same_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for ckpt in [&a, &b] {
        let o = train_small(&corpus, ckpt);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(std::fs::read(a.join("weights.bin")).unwrap(), std::fs::read(b.join("weights.bin")).unwrap());
    let metrics = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);

    let o = emd(&["eval", "--corpus", &corpus, "--model", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("OSR"));

    let script = dir.path().join("script.txt");
    std::fs::write(&script, "hello , how can i help ?\ni need a hotel in the north\n:state\n:reset\n").unwrap();
    let o = emd(&["track", "--model", a.to_str().unwrap(), "--script", script.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.starts_with("turn 0\n  domain: "), "{text}");
    assert!(text.trim_end().ends_with("reset"));

    let o = emd(&["bench-itc", "--model", a.to_str().unwrap(), "--slots", "5", "--turns", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("s,emd_passes,stub_passes"));
}

#[test]
fn grad_check_passes_on_a_small_model() {
    let o = emd(&["grad-check", "--dims", "4"]);
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("joint"));
}

#[test]
fn usage_errors_exit_one() {
    let o = emd(&["eval", "--bogus"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"));

    let o = emd(&[]);
    assert_eq!(o.status.code(), Some(1));

    let o = emd(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn missing_files_are_named() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("no-such-corpus");
    let o = emd(&["eval", "--corpus", missing.to_str().unwrap(), "--oracle"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no-such-corpus"), "{}", stderr(&o));

    let o = emd(&["track", "--model", missing.to_str().unwrap(), "--script", "x"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no-such-corpus"), "{}", stderr(&o));
}

#[test]
fn bad_train_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path());
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"batch_size": 0}"#).unwrap();
    let out = dir.path().join("ckpt");
    let o = emd(&["train", "--corpus", &corpus, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    std::fs::write(&cfg, r#"{"learning_rat": 0.1}"#).unwrap();
    let o = emd(&["train", "--corpus", &corpus, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
}
