use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn small_config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/small.toml")
}

fn gridcascade(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridcascade")).args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn run_all_twice_gives_identical_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let mut metrics = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let o = gridcascade(&["run-all", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{}", stderr(&o));
        let stdout = String::from_utf8_lossy(&o.stdout);
        for stage in ["grid-gen", "dataset-build", "train", "exposure", "baseline", "evaluate", "report"] {
            assert!(stdout.contains(stage), "{stdout}");
        }
        assert!(out.join("manifest.json").is_file());
        metrics.push(fs::read(out.join("metrics/metrics.csv")).unwrap());
    }
    assert_eq!(metrics[0], metrics[1]);
}

#[test]
fn exposure_before_train_fails_with_a_category() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let out = dir.path().to_str().unwrap();
    let o = gridcascade(&["exposure", "--config", cfg.to_str().unwrap(), "--out", out]);
    assert!(!o.status.success());
    let err = stderr(&o);
    assert_eq!(err.lines().count(), 1, "{err}");
    assert!(err.starts_with("error[missing-artifact]:"), "{err}");
    assert!(err.contains("checkpoint not found"), "{err}");
}

#[test]
fn config_errors_are_categorised() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "seed = 1\ntraining_grids = []\nevaluation_grids = []\n").unwrap();
    let o = gridcascade(&["grid-gen", "--config", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(stderr(&o).starts_with("error[config]:"), "{}", stderr(&o));

    let o = gridcascade(&["grid-gen", "--config", dir.path().join("absent.toml").to_str().unwrap()]);
    assert!(stderr(&o).starts_with("error[missing-artifact]:"), "{}", stderr(&o));
}

#[test]
fn stage_by_stage_matches_run_all_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config();
    let out = dir.path().join("staged");
    for stage in ["grid-gen", "dataset-build", "train", "exposure", "baseline", "evaluate", "report"] {
        let o = gridcascade(&[stage, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
        assert!(o.status.success(), "{stage}: {}", stderr(&o));
    }
    assert!(out.join("report/mpr.svg").is_file());
}
