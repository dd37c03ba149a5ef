use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 14] = [
    "--set",
    "dim=4",
    "--set",
    "n_nodes=2",
    "--set",
    "k=3",
    "--set",
    "l_max=10",
    "--set",
    "batch_size=16",
    "--set",
    "search_epochs=1",
    "--set",
    "retrain_epochs=2",
];

fn ddnas(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_ddnas"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "ddnas {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn corpus(dir: &Path) -> String {
    let path = dir.join("corpus.tsv");
    let p = path.to_str().unwrap().to_string();
    ddnas(&["synth", "--n", "120", "--seed", "4", "--out", &p]);
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn search_retrain_eval_export() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let out = dir.path().join("run");

    let mut args = vec!["search", "--data", &data, "--seed", "3", "--out", s(&out)];
    args.extend(TINY);
    ddnas(&args);
    for f in [
        "architecture.json",
        "architecture.dot",
        "alpha.json",
        "search_log.jsonl",
        "splits.json",
        "config.txt",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let log = std::fs::read_to_string(out.join("search_log.jsonl")).unwrap();
    assert!(log.lines().next().unwrap().contains("\"J_D\""));

    let arch = out.join("architecture.json");
    let cfg = out.join("config.txt");
    ddnas(&[
        "retrain",
        "--arch",
        s(&arch),
        "--data",
        &data,
        "--config",
        s(&cfg),
        "--out",
        s(&out),
    ]);
    let model = out.join("model.json");
    assert!(model.exists());

    let eval = ddnas(&[
        "eval",
        "--model",
        s(&model),
        "--data",
        &data,
        "--split",
        "test",
    ]);
    let metrics: serde_json::Value = serde_json::from_slice(&eval.stdout).unwrap();
    let saved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(metrics, saved);

    let dot = ddnas(&["export", "--model", s(&model), "--dot"]);
    let dot = String::from_utf8(dot.stdout).unwrap();
    assert!(dot.starts_with("digraph"));

    let csv = out.join("hist.csv");
    ddnas(&[
        "export",
        "--model",
        s(&model),
        "--hist",
        "--data",
        &data,
        "--out",
        s(&csv),
    ]);
    let csv = std::fs::read_to_string(csv).unwrap();
    assert_eq!(csv.lines().next(), Some("node,state,count"));
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
}

#[test]
fn config_file_and_flags_layer() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let cfg = dir.path().join("c.txt");
    std::fs::write(
        &cfg,
        "# tiny\ndim = 4\nn_nodes = 2\nk = 3\nl_max = 10\nseed = 1\nsearch_epochs = 1\n",
    )
    .unwrap();
    let out = dir.path().join("run");
    ddnas(&[
        "search",
        "--data",
        &data,
        "--config",
        s(&cfg),
        "--seed",
        "8",
        "--set",
        "k=2",
        "--out",
        s(&out),
    ]);
    let used = std::fs::read_to_string(out.join("config.txt")).unwrap();
    assert!(used.lines().any(|l| l == "seed = 8"), "{used}");
    assert!(used.lines().any(|l| l == "k = 2"));
    assert!(used.lines().any(|l| l == "dim = 4"));
}

#[test]
fn ablate_drops_pooling() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let out = dir.path().join("abl");
    let mut args = vec![
        "ablate",
        "--drop",
        "Pooling",
        "--data",
        &data,
        "--out",
        s(&out),
    ];
    args.extend(TINY);
    ddnas(&args);
    let alpha: Vec<Vec<f64>> =
        serde_json::from_str(&std::fs::read_to_string(out.join("alpha.json")).unwrap()).unwrap();
    assert!(alpha.iter().all(|a| a.len() == 7));
    assert!(out.join("model.json").exists());
    let arch = std::fs::read_to_string(out.join("architecture.json")).unwrap();
    assert!(!arch.contains("Pool"));
}

#[test]
fn searches_repeat_under_one_seed() {
    let dir = tempfile::tempdir().unwrap();
    let data = corpus(dir.path());
    let alpha = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["search", "--data", &data, "--seed", "5", "--out", s(&out)];
        args.extend(TINY);
        ddnas(&args);
        std::fs::read_to_string(out.join("alpha.json")).unwrap()
    };
    assert_eq!(alpha("a"), alpha("b"));
}

#[test]
fn bad_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "pos\tfine\nmissing tab\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_ddnas"))
        .args(["search", "--data", s(&bad), "--out", s(dir.path())])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.tsv:2:"), "{err}");
}
