//! CLI contract tests: exit codes, diagnostics, artifact layout.

use std::path::Path;
use std::process::Command;

fn moose() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moose"))
}

#[test]
fn help_exits_zero_with_usage() {
    let out = moose().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("gen-data"));
    assert!(text.contains("Usage"));
}

#[test]
fn unknown_subcommand_exits_two_naming_the_token() {
    let out = moose().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("frobnicate"), "stderr should name the bad token: {err}");
}

#[test]
fn missing_config_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = moose()
        .args([
            "gen-data",
            "--config",
            "/nonexistent/path.cfg",
            "--out",
            dir.path().to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_override_key_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = moose()
        .args([
            "gen-data",
            "--out",
            dir.path().to_str().unwrap(),
            "--set",
            "data.imagesize=64",
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("imagesize"), "should name the unknown key: {err}");
}

fn gen_tiny_dataset(out: &Path) {
    let status = moose()
        .args([
            "gen-data",
            "--out",
            out.to_str().unwrap(),
            "--set",
            "data.image_size=64",
            "--set",
            "data.train_scenes=4",
            "--set",
            "data.val_scenes=2",
            "--set",
            "data.test_scenes=2",
        ])
        .status()
        .unwrap();
    assert!(status.success());
}

#[test]
fn gen_data_writes_resolved_config_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_dataset(dir.path());
    assert!(dir.path().join("resolved.cfg").exists());
    assert!(dir.path().join("dataset/manifest.txt").exists());
    let snapshot = std::fs::read_to_string(dir.path().join("resolved.cfg")).unwrap();
    assert!(snapshot.contains("image_size = 64"));
}

#[test]
fn eval_class_count_mismatch_exits_one_with_message() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_dataset(dir.path());

    // checkpoint with a different class count than the 8-class dataset
    let pcfg = moose_core::PyramidConfig {
        num_classes: 5,
        encoder_channels: 16,
        branch_dilations: vec![1, 2],
        branch_channels: 8,
        include_global_pool_branch: true,
        output_stride: 8,
    };
    let hcfg = moose_core::ProbeConfig {
        depth: 1,
        projection_channels: 8,
    };
    let model = moose_core::build_model(&pcfg, &hcfg, 1).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    moose_core::checkpoint::save_model(&model, &ckpt).unwrap();

    let out = moose()
        .args([
            "eval",
            "--out",
            dir.path().to_str().unwrap(),
            "--data",
            dir.path().join("dataset").to_str().unwrap(),
            "--ckpt",
            ckpt.to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(
        err.contains("N=5") && err.contains("N=8"),
        "diagnostic must name both class counts: {err}"
    );
}

#[test]
fn eval_and_report_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_dataset(dir.path());

    let pcfg = moose_core::PyramidConfig {
        num_classes: 8,
        encoder_channels: 16,
        branch_dilations: vec![1, 2],
        branch_channels: 8,
        include_global_pool_branch: true,
        output_stride: 8,
    };
    let hcfg = moose_core::ProbeConfig {
        depth: 1,
        projection_channels: 8,
    };
    let model = moose_core::build_model(&pcfg, &hcfg, 1).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    moose_core::checkpoint::save_model(&model, &ckpt).unwrap();

    for heads in ["global", "all"] {
        let status = moose()
            .args([
                "eval",
                "--out",
                dir.path().to_str().unwrap(),
                "--data",
                dir.path().join("dataset").to_str().unwrap(),
                "--ckpt",
                ckpt.to_str().unwrap(),
                "--score",
                "h",
                "--heads",
                heads,
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }

    let out = moose()
        .args(["report", "--out", dir.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("AUPR"), "table header: {table}");
    assert!(table.contains("global_only") && table.contains("all_heads"));
}

#[test]
fn identical_runs_produce_identical_reports() {
    let dir = tempfile::tempdir().unwrap();
    gen_tiny_dataset(dir.path());
    let run = |out: &Path| {
        let status = moose()
            .args([
                "train",
                "--out",
                out.to_str().unwrap(),
                "--data",
                dir.path().join("dataset").to_str().unwrap(),
                "--seed",
                "3",
                "--set",
                "train.epochs=1",
                "--set",
                "train.probe_epochs=1",
                "--set",
                "train.early_stop=false",
                "--set",
                "model.encoder_channels=16",
                "--set",
                "model.branch_channels=8",
                "--set",
                "model.branch_dilations=1,2",
                "--set",
                "probe.projection_channels=8",
            ])
            .status()
            .unwrap();
        assert!(status.success());
        let eval = moose()
            .args([
                "eval",
                "--out",
                out.to_str().unwrap(),
                "--data",
                dir.path().join("dataset").to_str().unwrap(),
                "--ckpt",
                out.join("moose.ckpt").to_str().unwrap(),
            ])
            .output()
            .unwrap();
        assert!(eval.status.success());
        std::fs::read_to_string(out.join("eval_moose_h_all_heads.kv")).unwrap()
    };
    let a = run(tempfile::tempdir().unwrap().path());
    let b = run(tempfile::tempdir().unwrap().path());
    assert_eq!(a, b, "same config + seed must reproduce the report bitwise");
}
