use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
[data]
n_entities = 8
facts_per_entity = 2
forget_fraction = 0.2

[model]
n_layers = 1
d_model = 16
n_heads = 2
d_ff = 32

[train]
max_epochs = 300
batch_size = 4
learning_rate = 0.01
em_bar = 0.5
check_every = 10

[attribution]
m = 2

[unlearn.fo]
epochs = 1
[unlearn.so]
epochs = 1
[unlearn.simu]
epochs = 1
"#;

fn simu(dir: &Path, args: &[&str]) -> Output {
    let cfg = dir.join("small.toml");
    if !cfg.exists() {
        std::fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_simu"))
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .args(args)
        .env_remove("SIMU_OUT")
        .output()
        .unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn missing_artifact_exits_2_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let o = simu(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("corpus.jsonl"));
}

#[test]
fn config_errors_exit_3_with_field() {
    let dir = tempfile::tempdir().unwrap();
    let o = simu(dir.path(), &["--t", "1.5", "gen-data"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("mask.threshold"), "{}", stderr(&o));

    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[mask]\nthreshhold = 0.3\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_simu")).arg("--config").arg(&bad).arg("gen-data").output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("threshhold"), "{}", stderr(&o));

    let o = simu(dir.path(), &["--method", "nope", "unlearn"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn out_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    std::fs::write(&cfg, "[io]\nout_dir = \"nested/run\"\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_simu"))
        .arg("--config")
        .arg(&cfg)
        .arg("gen-data")
        .env("SIMU_OUT", dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(dir.path().join("nested/run/corpus.jsonl").exists());
}

#[test]
fn full_pipeline_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let o = simu(dir.path(), &["run"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = dir.path().join("out");
    for f in ["eval_original.json", "eval_fo.json", "eval_so.json", "eval_simu.json", "report.md", "report.csv", "threshold_counts.csv"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let report = std::fs::read_to_string(out.join("report.md")).unwrap();
    assert!(report.contains("SIMU-GradDiff") && report.contains("Original"));

    let o = simu(dir.path(), &["ablate", "--param", "t", "--values", "0.1,0.3,0.5,0.8"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(out.join("ablate_t.csv")).unwrap();
    let counts: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(counts.len(), 4);
    assert!(counts.windows(2).all(|w| w[0] >= w[1]), "{counts:?}");

    let o = simu(dir.path(), &["ablate", "--param", "m", "--values", "1,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(out.join("ablate_m.csv")).unwrap().lines().count(), 3);

    // Report refuses evaluations computed on different corpora.
    let path = out.join("eval_so.json");
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    v["corpus_hash"] = serde_json::Value::String("0".repeat(64));
    std::fs::write(&path, serde_json::to_vec(&v).unwrap()).unwrap();
    let o = simu(dir.path(), &["report"]);
    assert_eq!(o.status.code(), Some(4), "{}", stderr(&o));
}

#[test]
fn single_method_and_strategy_overrides() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gen-data", "train", "attribute"] {
        let o = simu(dir.path(), &["--mask-strategy", "forget_only", cmd]);
        assert!(o.status.success(), "{cmd}: {}", stderr(&o));
    }
    let out = dir.path().join("out");
    assert!(out.join("scores_retain.bin").exists());
    let o = simu(dir.path(), &["--mask-strategy", "forget_only", "mask"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = simu(dir.path(), &["--method", "simu", "--lambda", "1.5", "unlearn"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out.join("simu.ckpt").exists() && !out.join("so.ckpt").exists());
    let o = simu(dir.path(), &["--method", "simu", "evaluate"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("simu:"));
}
