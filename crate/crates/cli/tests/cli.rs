use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use prunelab_core::data::orthogonality_error;
use prunelab_core::model::Checkpoint;
use prunelab_core::pruners::Mode;
use prunelab_core::Tensor2D;
use prunelab_cli::config::ExperimentConfig;
use prunelab_cli::reports::read_tasks;

const SMALL: &str = "\
train_size = 256
eval_size = 128
hidden_width = 16
hidden_layers = 2
pretrain_steps = 60
steps = 40
log_every = 20
";

fn prunelab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prunelab"))
        .args(args)
        .env("PRUNELAB_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("run.cfg");
    std::fs::write(&path, format!("{SMALL}{extra}")).unwrap();
    path
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read_csv(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let head = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|rec| rec.unwrap().iter().map(String::from).collect()).collect();
    (head, rows)
}

#[test]
fn gen_tasks_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "");
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    ok(prunelab(&["gen-tasks", "--config", s(&cfg), "--out", s(&a)]));
    ok(prunelab(&["gen-tasks", "--config", s(&cfg), "--out", s(&b)]));
    ok(prunelab(&["gen-tasks", "--config", s(&cfg), "--out", s(&c), "--seed", "7"]));
    for name in ["source_train.csv", "target_eval.csv", "rotation.csv"] {
        let first = std::fs::read(a.join("tasks").join(name)).unwrap();
        assert_eq!(first, std::fs::read(b.join("tasks").join(name)).unwrap(), "{name}");
        assert_ne!(first, std::fs::read(c.join("tasks").join(name)).unwrap(), "{name}");
    }
}

#[test]
fn generated_tasks_are_balanced_with_an_orthogonal_rotation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    ok(prunelab(&["gen-tasks", "--out", s(&out)]));
    let tasks = read_tasks(&out.join("tasks"), 8).unwrap();
    for data in [&tasks.source_train, &tasks.target_train] {
        let n = data.len() as f64;
        let p = 1.0 / 8.0;
        let sigma = (n * p * (1.0 - p)).sqrt();
        for count in data.class_counts() {
            assert!((count as f64 - n * p).abs() <= 3.0 * sigma, "{count} of {n}");
        }
    }
    let (head, rows) = read_csv(&out.join("tasks/rotation.csv"));
    let values: Vec<f64> = rows.iter().flatten().map(|v| v.parse().unwrap()).collect();
    let q = Tensor2D::new(rows.len(), head.len(), values).unwrap();
    assert!(orthogonality_error(&q) < 1e-10);
}

#[test]
fn missing_task_file_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let out = prunelab(&["pretrain", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("source_train.csv"), "{err}");
}

#[test]
fn unknown_key_exits_with_config_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "learning_rate = 0.1\n");
    let out = prunelab(&["gen-tasks", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
}

#[test]
fn pipeline_writes_reports_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "pruner = soft_movement\nlambda_mvp = 0.01\n");
    let out = dir.path().join("out");
    for cmd in ["gen-tasks", "pretrain", "fineprune"] {
        ok(prunelab(&[cmd, "--config", s(&cfg), "--out", s(&out)]));
    }
    let (head, rows) = read_csv(&out.join("pretrain/metrics.csv"));
    assert_eq!(&head[..5], ["step", "kept_fraction", "train_loss", "eval_accuracy", "regularizer"]);
    assert_eq!(rows.len(), 6);
    let (head, rows) = read_csv(&out.join("fineprune/scatter.csv"));
    assert_eq!(head, ["layer", "i", "j", "w_pretrained", "w_final", "score_final", "pruned"]);
    assert_eq!(rows.len(), 32 * 16 + 16 * 16);
    let (head, _) = read_csv(&out.join("fineprune/v_shape.csv"));
    assert_eq!(head, ["top_decile", "min_abs_weight", "zero_crossings"]);
    assert!(out.join("fineprune/layer_sparsity.csv").is_file());
    let fine = Checkpoint::load(out.join("fineprune/model.ckpt")).unwrap();
    assert_eq!(fine.schedule, None);

    // Zero further steps from a resumed checkpoint leave the model unchanged.
    let resume_cfg = dir.path().join("resume.cfg");
    let text = SMALL.replace("pretrain_steps = 60", "pretrain_steps = 0");
    let resume_from = out.join("pretrain/model.ckpt");
    std::fs::write(&resume_cfg, format!("{text}resume = {}\n", s(&resume_from))).unwrap();
    let resumed = dir.path().join("resumed");
    ok(prunelab(&["gen-tasks", "--config", s(&resume_cfg), "--out", s(&resumed)]));
    ok(prunelab(&["pretrain", "--config", s(&resume_cfg), "--out", s(&resumed)]));
    let tasks = read_tasks(&out.join("tasks"), 8).unwrap();
    let before = Checkpoint::load(out.join("pretrain/model.ckpt")).unwrap().model;
    let after = Checkpoint::load(resumed.join("pretrain/model.ckpt")).unwrap().model;
    let x = &tasks.target_eval.features;
    assert_eq!(before.logits(x, Mode::Eval).unwrap(), after.logits(x, Mode::Eval).unwrap());
}

#[test]
fn sweep_counts_rows_and_ignores_worker_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "sweep_seeds = 5\ncalibrate_lambda = false\n");
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(prunelab(&["sweep", "--config", s(&cfg), "--out", s(&a), "--jobs", "1"]));
    ok(prunelab(&["sweep", "--config", s(&cfg), "--out", s(&b), "--jobs", "3"]));
    let summary = a.join("sweep/summary.csv");
    assert_eq!(std::fs::read(&summary).unwrap(), std::fs::read(b.join("sweep/summary.csv")).unwrap());
    let (head, rows) = read_csv(&summary);
    assert_eq!(
        head,
        ["pruner", "kept_target", "seed", "distilled", "lambda", "kept_final", "eval_accuracy", "status"]
    );
    let cells: Vec<_> = rows.iter().filter(|r| r[2] != "mean" && r[2] != "std").collect();
    assert_eq!(cells.len(), 4 * 3 * 5);
    assert!(cells.iter().all(|r| r[7] == "ok"), "{cells:?}");
    assert_eq!(rows.len() - cells.len(), 4 * 3 * 2);
}

#[test]
fn corrupted_verification_exits_with_failure_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), "verify_corrupt_score_gradient = true\n");
    let out = prunelab(&["verify", "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
    let (head, rows) = read_csv(&dir.path().join("verify/report.csv"));
    assert_eq!(head, ["oracle", "status", "metric", "threshold"]);
    let failed: Vec<&str> = rows.iter().filter(|r| r[1] == "FAIL").map(|r| r[0].as_str()).collect();
    assert_eq!(failed, ["accumulator_replay", "sign_property"]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("sign_property"));
}

#[test]
fn default_config_parses_the_documented_keys() {
    let cfg = ExperimentConfig::parse_str(SMALL).unwrap();
    assert_eq!(cfg.task.train_size, 256);
    assert_eq!(cfg.pretrain_steps, 60);
}
