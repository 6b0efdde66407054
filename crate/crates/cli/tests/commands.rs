//! Commands driven through the library and the `rahn` binary.

use std::path::{Path, PathBuf};
use std::process::Command;

use rahn::config::ExperimentConfig;
use rahn::eval::SweepGrid;
use rahn::model::RahnModel;
use rahn::tensor::read_checkpoint;
use rahn_cli::{
    cmd_evaluate, cmd_gen_fixture, cmd_reputation, cmd_sweep, cmd_train, resolve_config, CommonArgs, FixtureArgs,
    CHECKPOINT, REPUTATIONS_CSV, SWEEP_CSV, TRAIN_REPORT,
};

fn fixture(dir: &Path) -> PathBuf {
    cmd_gen_fixture(&FixtureArgs {
        out: dir.to_path_buf(),
        users: 30,
        services: 60,
        rank: 3,
        noise: 0.05,
        observed: 1.0,
        user_regions: 3,
        service_regions: 5,
        seed: 11,
    })
    .unwrap()
}

fn config(path: &Path, sets: &[&str]) -> ExperimentConfig {
    let args = CommonArgs {
        config: Some(path.to_path_buf()),
        overrides: sets.iter().map(|s| s.to_string()).collect(),
        seed: None,
    };
    resolve_config(&args, None).unwrap()
}

fn rahn(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_rahn"))
        .args(args)
        .env_remove("RAHN_SEED")
        .output()
        .unwrap()
}

#[test]
fn fixture_training_run_trends_down_and_evaluates_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&fixture(dir.path()), &[]);
    let start = std::time::Instant::now();
    let out = cmd_train(&cfg).unwrap();
    assert!(start.elapsed().as_secs_f64() < 60.0);
    let losses = &out.report.training.epoch_losses;
    assert_eq!(losses.len(), 50);
    // Ten-epoch window means never increase.
    let windows: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
    assert!(windows.windows(2).all(|w| w[1] <= w[0]), "{windows:?}");
    assert_eq!(out.report.npe_label, "1008");

    let again = cmd_evaluate(&cfg, &out.checkpoint).unwrap();
    assert_eq!(again, out.evaluation);
    let n_test = again.n_test as f64;
    assert_eq!(again.n_removed_outliers, (0.1 * n_test).ceil() as usize);

    let none = cmd_evaluate(&config(&dir.path().join("config.json"), &["protocol.outlier_fraction=0"]), &out.checkpoint)
        .unwrap();
    assert_eq!(none.n_removed_outliers, 0);
    assert_eq!(none.n_evaluated, none.n_test);
}

#[test]
fn zero_epochs_checkpoint_is_the_initialisation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&fixture(dir.path()), &["model.epochs=0"]);
    let out = cmd_train(&cfg).unwrap();
    let ck = read_checkpoint(&out.checkpoint).unwrap();
    let fresh = RahnModel::new(cfg.model_config(), out.report.dims).unwrap();
    let values: Vec<Vec<f64>> = fresh.params.iter().map(|(_, p)| p.value.data().to_vec()).collect();
    assert_eq!(ck.values, values);
}

#[test]
fn default_label_and_config_echo() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path());
    let cfg = config(&path, &["model.d=16", "model.n_stack=2", "model.epochs=1"]);
    let out = cmd_train(&cfg).unwrap();
    assert_eq!(out.report.npe_label, "2016");
    let written: serde_json::Value =
        serde_json::from_slice(&std::fs::read(cfg.paths.output_dir.join(TRAIN_REPORT)).unwrap()).unwrap();
    assert_eq!(written["config"], cfg.to_value());
    assert_eq!(written["seed"], 42);
}

#[test]
fn reputation_rows_and_rerun_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&fixture(dir.path()), &[]);
    let table = cmd_reputation(&cfg, false).unwrap();
    assert_eq!(table.users.len(), 30);
    assert_eq!(table.services.len(), 60);
    let first = std::fs::read(cfg.paths.output_dir.join(REPUTATIONS_CSV)).unwrap();
    assert_eq!(String::from_utf8_lossy(&first).lines().count(), 1 + 30 + 60);
    cmd_reputation(&cfg, false).unwrap();
    assert_eq!(std::fs::read(cfg.paths.output_dir.join(REPUTATIONS_CSV)).unwrap(), first);
    let full = cmd_reputation(&cfg, true).unwrap();
    let n: u64 = full.users.iter().map(|e| e.feedback.po + e.feedback.ne).sum();
    assert_eq!(n, 30 * 60);
}

#[test]
fn sweep_grids_have_expected_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(&fixture(dir.path()), &["model.epochs=1"]);
    let fig2 = SweepGrid {
        n_stack: vec![0, 1, 2],
        use_pe: vec![false, true],
        d: vec![8],
        densities: vec![0.02, 0.04],
    };
    let out = cmd_sweep(&cfg, &fig2).unwrap();
    assert_eq!(out.cells.len(), 12);
    let csv = std::fs::read_to_string(cfg.paths.output_dir.join(SWEEP_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 13);

    let fig4 = SweepGrid {
        n_stack: vec![0, 1, 2],
        use_pe: vec![false],
        d: vec![8, 16, 32],
        densities: vec![0.1],
    };
    let out = cmd_sweep(&cfg, &fig4).unwrap();
    assert_eq!(out.cells.len(), 18 / 2);
    assert_eq!(out.n_failed, 0);
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path());
    let p = path.to_str().unwrap();

    let missing = rahn(&["train", "--set", "paths.matrix=/definitely/missing.txt"]);
    assert_eq!(missing.status.code(), Some(3));
    let bad_config = rahn(&["train", "-c", p, "--set", "model.d=6"]);
    assert_eq!(bad_config.status.code(), Some(2));
    let usage = rahn(&["train", "--bogus"]);
    assert_eq!(usage.status.code(), Some(2));
    let empty = rahn(&["sweep", "-c", p, "--d"]);
    assert_eq!(empty.status.code(), Some(2));

    let diverged = rahn(&["train", "-c", p, "--set", "model.learning_rate=1e308", "--set", "paths.output_dir=div"]);
    assert_eq!(diverged.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&diverged.stderr).contains("last finite loss"));
    assert!(!dir.path().join("div").exists(), "no partial outputs");

    let all_failed = rahn(&["sweep", "-c", p, "--set", "rcm.n_user_clusters=1000", "--n-stack", "0", "--pe", "0"]);
    assert_eq!(all_failed.status.code(), Some(6));

    let trained = rahn(&["train", "-c", p, "--set", "model.epochs=1"]);
    assert_eq!(trained.status.code(), Some(0), "{}", String::from_utf8_lossy(&trained.stderr));
    let ck = dir.path().join("out").join(CHECKPOINT);
    let ck = ck.to_str().unwrap();
    let ok = rahn(&["evaluate", "-c", p, "--checkpoint", ck]);
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("NPEd=1008"));
    let incompatible = rahn(&["evaluate", "-c", p, "--set", "model.n_stack=2", "--checkpoint", ck]);
    assert_eq!(incompatible.status.code(), Some(5));
    let garbage = dir.path().join("garbage.ckpt");
    std::fs::write(&garbage, b"not a checkpoint").unwrap();
    let unreadable = rahn(&["evaluate", "-c", p, "--checkpoint", garbage.to_str().unwrap()]);
    assert_eq!(unreadable.status.code(), Some(3));
}

#[test]
fn seed_environment_and_flag() {
    let dir = tempfile::tempdir().unwrap();
    let path = fixture(dir.path());
    let p = path.to_str().unwrap();
    let seed_of = |extra: &[&str], env: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_rahn"));
        cmd.args(["train", "-c", p, "--set", "model.epochs=0"]).args(extra);
        match env {
            Some(v) => cmd.env("RAHN_SEED", v),
            None => cmd.env_remove("RAHN_SEED"),
        };
        assert!(cmd.status().unwrap().success());
        let report: serde_json::Value =
            serde_json::from_slice(&std::fs::read(dir.path().join("out").join(TRAIN_REPORT)).unwrap()).unwrap();
        report["seed"].as_u64().unwrap()
    };
    assert_eq!(seed_of(&[], None), 42);
    assert_eq!(seed_of(&[], Some("5")), 5);
    assert_eq!(seed_of(&["--seed", "6"], Some("5")), 6);
}
