use std::path::Path;
use std::time::Instant;

use codepred::cli::run;

fn cp(args: &[&str]) -> i32 {
    run(std::iter::once("codepred").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// synth -> prepare -> vocab -> train; returns the training output directory.
fn pipeline(root: &Path, kind: &str) -> std::path::PathBuf {
    let trees = root.join("trees.jsonl");
    let data = root.join(format!("data-{kind}"));
    let vocab = root.join(format!("vocab-{kind}.json"));
    let out = root.join(format!("ckpt-{kind}"));
    let config = root.join("run.json");
    std::fs::write(
        &config,
        r#"{"model": {"n_block": 1, "n_head": 2, "d_model": 16}, "train": {"max_epochs": 2, "batch_size": 4}}"#,
    )
    .unwrap();
    assert_eq!(cp(&["--quiet", "--seed", "4", "synth", "--trees", "20", "--out", p(&trees)]), 0);
    assert_eq!(
        cp(&["--quiet", "prepare", "--model-kind", kind, "--input", p(&trees), "--out", p(&data), "--context", "32", "--stride", "16"]),
        0
    );
    assert_eq!(cp(&["--quiet", "vocab", "--data", p(&data), "--out", p(&vocab)]), 0);
    assert_eq!(
        cp(&[
            "--quiet", "--seed", "3", "train", "--config", p(&config), "--data", p(&data), "--vocab", p(&vocab), "--out", p(&out),
            "--model-kind", kind,
        ]),
        0
    );
    out
}

#[test]
fn end_to_end_pipeline_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let out = pipeline(dir.path(), "trav");
    let data = dir.path().join("data-trav");
    let vocab = dir.path().join("vocab-trav.json");
    assert_eq!(
        cp(&["--quiet", "eval", "--ckpt", p(&out), "--data", p(&data), "--vocab", p(&vocab), "--breakdown", "--joint"]),
        0
    );
    assert!(t0.elapsed().as_secs() < 120);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["kind"], "trav");
    assert!(report["joint_leaf"]["count"].as_u64().unwrap() > 0);
    assert!(std::fs::read_to_string(out.join("report.txt")).unwrap().contains("MRR"));

    let log = std::fs::read_to_string(out.join("run.log.jsonl")).unwrap();
    let header: serde_json::Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(header["config"]["model"]["d_model"], 16);
    assert_eq!(header["config"]["train"]["max_epochs"], 2);
    assert_eq!(header["config"]["train"]["seed"], 3);
    assert!(log.lines().count() > 1);

    let heat = dir.path().join("heat");
    assert_eq!(
        cp(&["--quiet", "inspect", "--ckpt", p(&out), "--data", p(&data), "--vocab", p(&vocab), "--tree-index", "2", "--out", p(&heat)]),
        0
    );
    assert!(std::fs::read_to_string(heat.join("saliency.svg")).unwrap().starts_with("<svg"));
    assert!(heat.join("saliency.csv").exists());
}

#[test]
fn same_seed_gives_byte_identical_reports() {
    let reports: Vec<Vec<u8>> = (0..2)
        .map(|_| {
            let dir = tempfile::tempdir().unwrap();
            let out = pipeline(dir.path(), "rootpath");
            let data = dir.path().join("data-rootpath");
            let vocab = dir.path().join("vocab-rootpath.json");
            assert_eq!(cp(&["--quiet", "eval", "--ckpt", p(&out), "--data", p(&data), "--vocab", p(&vocab), "--breakdown"]), 0);
            std::fs::read(out.join("report.json")).unwrap()
        })
        .collect();
    assert_eq!(reports[0], reports[1]);
}

#[test]
fn kind_mismatch_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let trees = dir.path().join("t.jsonl");
    let data = dir.path().join("d");
    let vocab = dir.path().join("v.json");
    assert_eq!(cp(&["--quiet", "synth", "--trees", "3", "--out", p(&trees)]), 0);
    assert_eq!(cp(&["--quiet", "prepare", "--model-kind", "rootpath", "--input", p(&trees), "--out", p(&data)]), 0);
    assert_eq!(cp(&["--quiet", "vocab", "--data", p(&data), "--out", p(&vocab)]), 0);
    let out = dir.path().join("o");
    assert_eq!(
        cp(&["--quiet", "train", "--data", p(&data), "--vocab", p(&vocab), "--out", p(&out), "--model-kind", "trav", "--epochs", "1"]),
        1
    );
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(cp(&["frobnicate"]), 2);
    assert_eq!(cp(&["prepare", "--model-kind", "nope", "--input", "x", "--out", "y"]), 2);
    assert_eq!(cp(&["eval", "--data", "x"]), 2);
}

#[test]
fn unknown_config_keys_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(&config, r#"{"model": {"d_modle": 16}}"#).unwrap();
    assert_eq!(cp(&["--quiet", "train", "--config", p(&config)]), 1);
}
