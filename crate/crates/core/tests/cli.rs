use std::path::Path;
use std::process::{Command, Output};

fn mtdistill(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mtdistill"))
        .args(args)
        .env_remove("MTDISTILL_SEED")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn write_config(dir: &Path) -> String {
    let path = dir.join("run.cfg");
    std::fs::write(
        &path,
        "seed = 21\n\
         gen.counts = 240,240,240\n\
         gen.val_counts = 80,80,80\n\
         train.teacher_epochs = 2\n\
         train.student_epochs = 1\n\
         train.num_students = 2\n",
    )
    .unwrap();
    path.display().to_string()
}

#[test]
fn no_arguments_is_usage_error() {
    let out = mtdistill(&[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn unknown_subcommand_and_flag_are_usage_errors() {
    assert_eq!(mtdistill(&["distill-everything"]).status.code(), Some(1));
    assert_eq!(mtdistill(&["selfcheck", "--bogus"]).status.code(), Some(1));
}

#[test]
fn bad_config_value_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "distill.lambda = 1.5\n").unwrap();
    let out = dir.path().join("out");
    let code = mtdistill(&[
        "train-cohort",
        "--config",
        cfg.to_str().unwrap(),
        "--out-dir",
        out.to_str().unwrap(),
    ])
    .status
    .code();
    assert_eq!(code, Some(1));
}

#[test]
fn missing_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().display().to_string();
    let out = mtdistill(&[
        "eval",
        "--ckpt",
        &format!("{d}/none.mtnet"),
        "--data",
        &d,
        "--out",
        &format!("{d}/o"),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn selfcheck_passes() {
    let out = mtdistill(&["selfcheck"]);
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(text.lines().filter(|l| l.starts_with("PASS")).count(), 9, "{text}");
    assert!(!text.contains("FAIL"));
}

#[test]
fn cohort_twice_gives_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut runs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = mtdistill(&["train-cohort", "--config", &cfg, "--out-dir", out.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        runs.push(out);
    }
    for f in ["report.csv", "report.txt", "metrics.csv", "manifest.tsv", "config.cfg"] {
        let a = std::fs::read(runs[0].join(f)).unwrap();
        let b = std::fs::read(runs[1].join(f)).unwrap();
        assert_eq!(a, b, "{f} differs");
    }
    let report = std::fs::read_to_string(runs[0].join("report.csv")).unwrap();
    let models: Vec<&str> = report.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(models, ["teacher", "student0", "student1", "ensemble"]);
}

#[test]
fn resolved_config_materializes_seeds() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out = dir.path().join("o");
    let o = Command::new(env!("CARGO_BIN_EXE_mtdistill"))
        .args([
            "train-cohort",
            "--config",
            &cfg,
            "--seed",
            "5",
            "--out-dir",
            out.to_str().unwrap(),
        ])
        .env("MTDISTILL_SEED", "99")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let text = std::fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(text.lines().any(|l| l == "seed = 5"), "{text}");
    assert!(
        text.lines()
            .any(|l| l.starts_with("train.student_seeds = ") && l.contains(',')),
        "{text}"
    );
    // the saved config reproduces the run
    let again = dir.path().join("again");
    let o = mtdistill(&[
        "train-cohort",
        "--config",
        out.join("config.cfg").to_str().unwrap(),
        "--out-dir",
        again.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(
        std::fs::read(out.join("report.csv")).unwrap(),
        std::fs::read(again.join("report.csv")).unwrap()
    );
}

#[test]
fn env_seed_is_fallback() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d");
    let o = Command::new(env!("CARGO_BIN_EXE_mtdistill"))
        .args([
            "gen-data",
            "--counts",
            "8,8,8",
            "--val-counts",
            "4,4,4",
            "--out",
            out.to_str().unwrap(),
        ])
        .env("MTDISTILL_SEED", "77")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("config.cfg")).unwrap();
    assert!(text.lines().any(|l| l == "seed = 77"), "{text}");
}
