//! End-to-end tests of the `camopad` binary: every subcommand is exercised
//! through a real subprocess against files on disk.

use std::path::Path;
use std::process::{Command, Output};

fn camopad(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_camopad"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("failed to spawn camopad")
}

fn assert_ok(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn write_config(dir: &Path, extra: &str) -> std::path::PathBuf {
    let path = dir.join("run.cfg");
    let base = "\
model.preset = tiny
train.input_size = 64
train.lr = 2e-3
train.weight_decay = 0.01
train.batch_size = 4
train.seed = 11
data.tasks = Amphibian, Bird
data.train_per_task = 2
data.test_per_task = 1
data.side = 32
";
    std::fs::write(&path, format!("{base}{extra}")).unwrap();
    path
}

#[test]
fn train_writes_checkpoint_metrics_and_predictions() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.epochs = 1\n");
    let out = camopad(
        &[
            "train",
            "--config",
            cfg.to_str().unwrap(),
            "--regime",
            "st",
            "--tasks",
            "Amphibian",
            "--out",
            "run-st",
        ],
        dir.path(),
    );
    assert_ok(&out, "train st");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("Amphibian:"), "summary line missing: {stdout}");

    let run = dir.path().join("run-st");
    assert!(run.join("checkpoint.cpad").is_file());
    assert!(run.join("loss_curve.csv").is_file());
    assert!(run.join("eval.json").is_file());
    assert!(run.join("eval.csv").is_file());
    // One prediction per test sample, 8-bit grayscale, at original size.
    let pred = run.join("predictions/Amphibian/Amphibian-0002.png");
    assert!(pred.is_file(), "missing prediction map");
    let img = image::open(&pred).unwrap();
    assert_eq!(img.width(), 32);
    assert_eq!(img.height(), 32);

    let curve = std::fs::read_to_string(run.join("loss_curve.csv")).unwrap();
    assert!(curve.starts_with("epoch,loss\n0,"));
    assert_eq!(curve.lines().count(), 2);

    let eval: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("eval.json")).unwrap())
            .unwrap();
    assert_eq!(eval[0]["task"], "Amphibian");
    assert_eq!(eval[0]["n_samples"], 1);
    assert!(eval[0]["score"].as_f64().unwrap().is_finite());
}

#[test]
fn transfer_regime_consumes_a_source_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.epochs = 1\n");
    let cfg = cfg.to_str().unwrap();
    assert_ok(
        &camopad(
            &[
                "train", "--config", cfg, "--regime", "st", "--tasks", "Amphibian",
                "--out", "src-run",
            ],
            dir.path(),
        ),
        "source train",
    );
    let out = camopad(
        &[
            "train",
            "--config",
            cfg,
            "--regime",
            "ms-st",
            "--tasks",
            "Bird",
            "--source-ckpt",
            "src-run/checkpoint.cpad",
            "--out",
            "dst-run",
        ],
        dir.path(),
    );
    assert_ok(&out, "transfer train");
    assert!(dir.path().join("dst-run/checkpoint.cpad").is_file());

    // The transfer kinds refuse to run without a checkpoint.
    let out = camopad(
        &[
            "train", "--config", cfg, "--regime", "ms-st", "--tasks", "Bird",
            "--out", "bad-run",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("source checkpoint"),
        "unexpected message: {stderr}"
    );
}

#[test]
fn eval_scores_predictions_and_records_issues() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "train.epochs = 1\n");
    assert_ok(
        &camopad(
            &[
                "train",
                "--config",
                cfg.to_str().unwrap(),
                "--regime",
                "st",
                "--tasks",
                "Amphibian",
                "--out",
                "run",
            ],
            dir.path(),
        ),
        "train",
    );

    // Build a GT directory from the synthetic dataset on disk.
    assert_ok(
        &camopad(
            &[
                "synth", "--tasks", "Amphibian", "--train-per-task", "2",
                "--test-per-task", "1", "--side", "32", "--seed", "11", "--out", "data",
            ],
            dir.path(),
        ),
        "synth",
    );
    let gt_dir = dir.path().join("data/Amphibian/test/GT");
    assert!(gt_dir.join("Amphibian-0002.png").is_file());

    let out = camopad(
        &[
            "eval",
            "--pred",
            "run/predictions/Amphibian",
            "--gt",
            gt_dir.to_str().unwrap(),
            "--out",
            "report.json",
        ],
        dir.path(),
    );
    assert_ok(&out, "eval");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report.json")).unwrap())
            .unwrap();
    assert_eq!(report["n_samples"], 1);
    assert!(report["score"].as_f64().unwrap().is_finite());
    assert_eq!(report["issues"].as_array().unwrap().len(), 0);
    assert!(dir.path().join("report.csv").is_file());

    // A mask with no prediction and a size-mismatched pair are both
    // recorded as issues, and the rest still gets scored.
    let extra_gt = gt_dir.join("stray.png");
    std::fs::copy(gt_dir.join("Amphibian-0002.png"), &extra_gt).unwrap();
    let big = image::GrayImage::from_pixel(48, 48, image::Luma([255]));
    big.save(dir.path().join("run/predictions/Amphibian/stray.png"))
        .unwrap();
    let out = camopad(
        &[
            "eval",
            "--pred",
            "run/predictions/Amphibian",
            "--gt",
            gt_dir.to_str().unwrap(),
            "--out",
            "report2.json",
        ],
        dir.path(),
    );
    assert_ok(&out, "eval with issues");
    let report: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("report2.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(report["n_samples"], 1);
    let issues = report["issues"].as_array().unwrap();
    assert_eq!(issues.len(), 1);
    assert_eq!(issues[0]["stem"], "stray");
    assert!(issues[0]["reason"]
        .as_str()
        .unwrap()
        .contains("48x48"));
}

#[test]
fn matrix_group_and_report_compose_into_a_study() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        "train.epochs = 1\nprotocol.source_epochs = 1\n",
    );
    let cfg = cfg.to_str().unwrap();

    let out = camopad(
        &["transfer-matrix", "--config", cfg, "--out", "matrix.csv"],
        dir.path(),
    );
    assert_ok(&out, "transfer-matrix");
    assert!(dir.path().join("matrix.csv").is_file());
    assert!(dir.path().join("matrix.normalized.csv").is_file());
    assert!(dir.path().join("matrix.png").is_file());
    let text = std::fs::read_to_string(dir.path().join("matrix.csv")).unwrap();
    assert!(text.starts_with("task,Amphibian,Bird\n"));
    assert_eq!(text.lines().count(), 3);

    let out = camopad(
        &[
            "group", "--matrix", "matrix.csv", "--k", "1", "--out", "groups.json",
        ],
        dir.path(),
    );
    assert_ok(&out, "group");
    let groups: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("groups.json")).unwrap())
            .unwrap();
    assert_eq!(groups["Amphibian"].as_array().unwrap().len(), 1);
    assert_eq!(groups["Bird"].as_array().unwrap().len(), 1);

    // k beyond the source count is refused.
    let out = camopad(
        &[
            "group", "--matrix", "matrix.csv", "--k", "3", "--out", "bad.json",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("group size 3"));

    // Two runs, then the grid.
    for (regime, task, run) in [("st", "Amphibian", "runs/st-amphibian"), ("st", "Bird", "runs/st-bird")] {
        assert_ok(
            &camopad(
                &[
                    "train", "--config", cfg, "--regime", regime, "--tasks", task,
                    "--out", run,
                ],
                dir.path(),
            ),
            "grid train",
        );
    }
    let out = camopad(&["report", "--runs", "runs"], dir.path());
    assert_ok(&out, "report");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("st-amphibian"));
    assert!(stdout.contains("mean"));
    assert!(dir.path().join("runs/score_grid.csv").is_file());
}

#[test]
fn disk_datasets_train_through_the_same_path() {
    let dir = tempfile::tempdir().unwrap();
    assert_ok(
        &camopad(
            &[
                "synth", "--tasks", "Reptile,Insect", "--train-per-task", "2",
                "--test-per-task", "1", "--side", "32", "--seed", "3", "--out", "data",
            ],
            dir.path(),
        ),
        "synth",
    );
    let cfg_path = dir.path().join("disk.cfg");
    std::fs::write(
        &cfg_path,
        "model.preset = tiny\ntrain.input_size = 64\ntrain.lr = 2e-3\n\
         train.batch_size = 4\ntrain.epochs = 1\ntrain.seed = 3\n\
         data.mode = disk\ndata.root = data\ndata.tasks = Reptile, Insect\n",
    )
    .unwrap();
    let out = camopad(
        &[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--regime",
            "mt",
            "--tasks",
            "Reptile,Insect",
            "--out",
            "run-disk",
        ],
        dir.path(),
    );
    assert_ok(&out, "disk train");
    let eval: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(dir.path().join("run-disk/eval.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(eval.as_array().unwrap().len(), 2);
}

#[test]
fn bad_inputs_exit_nonzero_with_context() {
    let dir = tempfile::tempdir().unwrap();

    // Unknown config key.
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "data.tsks = A\n").unwrap();
    let out = camopad(
        &[
            "train", "--config", cfg.to_str().unwrap(), "--regime", "st",
            "--tasks", "A", "--out", "x",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown key"));

    // Unknown task name.
    let cfg = write_config(dir.path(), "train.epochs = 1\n");
    let out = camopad(
        &[
            "train", "--config", cfg.to_str().unwrap(), "--regime", "st",
            "--tasks", "Lichen", "--out", "x",
        ],
        dir.path(),
    );
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Lichen"));

    // Missing eval directory.
    let out = camopad(
        &["eval", "--pred", "nope", "--gt", "nope", "--out", "r.json"],
        dir.path(),
    );
    assert!(!out.status.success());
}
