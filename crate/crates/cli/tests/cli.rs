use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use proxykd::config::{BaselineKind, ExperimentConfig};
use proxykd::core::distill::Strategy;
use proxykd::core::models::StudentKind;
use proxykd::dataset::{load_splits, split_path};
use proxykd::experiment::read_summary;

fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seeds: vec![0, 1],
        student: StudentKind::Tiny,
        ..Default::default()
    };
    for spec in [&mut cfg.data.broad, &mut cfg.data.target] {
        spec.num_classes = 3;
        spec.samples_per_class = 10;
        spec.image_size = [16, 16, 3];
    }
    cfg.pretrain.epochs = 1;
    cfg.pretrain.width = 4;
    cfg.pretrain.batch_size = 16;
    cfg.reprogram.epochs = 2;
    cfg.reprogram.batch_size = 16;
    cfg.distill.total_epochs = 2;
    cfg.distill.batch_size = 16;
    cfg.strategies = vec![Strategy::Normal, Strategy::Progressive];
    cfg
}

fn write_config(dir: &Path, cfg: &ExperimentConfig) -> PathBuf {
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn proxykd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_proxykd"))
        .args(args)
        .env_remove("PROXYKD_OUTPUT_ROOT")
        .output()
        .unwrap()
}

fn arg(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn config_errors_exit_with_two_and_name_the_key() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("bad.toml");
    fs::write(&path, "schema_version = 1\n[distill]\nphase_splt = 0.3\n").unwrap();
    let out = proxykd(&["--config", arg(&path), "--out", arg(tmp.path()), "distill"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("distill.phase_splt"));
    assert!(!tmp.path().join("summary.csv").exists());
}

#[test]
fn missing_artifacts_exit_with_four_before_any_work() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &tiny_config());
    let ghost = tmp.path().join("no-such-checkpoint");
    let out = proxykd(&[
        "--config",
        arg(&cfg),
        "--out",
        arg(tmp.path()),
        "reprogram",
        "--teacher",
        arg(&ghost),
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(!tmp.path().join("teacher_extractor").exists());
    let out = proxykd(&[
        "--out",
        arg(tmp.path()),
        "eval",
        "--checkpoint",
        arg(&ghost),
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn divergence_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.seeds = vec![0];
    cfg.reprogram.lr = 1e30;
    let path = write_config(tmp.path(), &cfg);
    let out = proxykd(&[
        "--config",
        arg(&path),
        "--out",
        arg(tmp.path()),
        "reprogram",
    ]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = read_summary(&tmp.path().join("summary.csv")).unwrap();
    assert!(rows[0].status.starts_with("failed"));
}

#[test]
fn generated_data_round_trips_and_feeds_later_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.seeds = vec![3];
    let path = write_config(tmp.path(), &cfg);
    let out = proxykd(&["--config", arg(&path), "--out", arg(tmp.path()), "gen-data"]);
    assert_eq!(out.status.code(), Some(0));
    let target_dir = tmp.path().join("data/target");
    for split in ["train", "val", "test"] {
        assert!(split_path(&target_dir, split.parse().unwrap()).is_file());
    }
    let loaded = load_splits(&target_dir).unwrap();
    let fresh = proxykd::core::synth::generate_domain(&cfg.data.target).unwrap();
    assert_eq!(loaded, fresh);

    let run = tmp.path().join("run");
    let out = proxykd(&[
        "--config",
        arg(&path),
        "--out",
        arg(&run),
        "baseline",
        "scratch",
        "--dataset",
        arg(&target_dir),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let rows = read_summary(&run.join("summary.csv")).unwrap();
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].method, "scratch");
}

#[test]
fn end_to_end_run_is_reproducible_and_tabulated() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.baselines = vec![
        BaselineKind::Scratch,
        BaselineKind::Lin,
        BaselineKind::Mrkd,
        BaselineKind::VanillaKd,
    ];
    cfg.measure_gap = true;
    let path = write_config(tmp.path(), &cfg);
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        let out = proxykd(&[
            "--config",
            arg(&path),
            "--out",
            arg(dir),
            "--deterministic",
            "distill",
        ]);
        assert_eq!(
            out.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let rows = read_summary(&a.join("summary.csv")).unwrap();
    let methods: Vec<&str> = rows
        .iter()
        .filter(|r| r.seed == 0)
        .map(|r| r.method.as_str())
        .collect();
    assert_eq!(
        methods,
        [
            "normal",
            "progressive",
            "vanilla-kd",
            "scratch",
            "lin",
            "mrkd"
        ]
    );
    assert!(rows.iter().all(|r| r.is_ok() && r.student_top1.is_some()));
    assert!(rows
        .iter()
        .filter(|r| r.method == "progressive")
        .all(|r| r.mmd_before.is_some() && r.mmd_after.is_some()));
    for rel in [
        "summary.csv",
        "seed_0/progressive.csv",
        "seed_1/normal.csv",
        "seed_0/reprogram.csv",
        "table.csv",
    ] {
        assert_eq!(
            fs::read(a.join(rel)).unwrap(),
            fs::read(b.join(rel)).unwrap(),
            "{rel}"
        );
    }
    assert!(a.join("accuracy.svg").is_file() && a.join("mmd.svg").is_file());

    let student = a.join("seed_0/progressive_student");
    let out = proxykd(&[
        "--config",
        arg(&path),
        "--out",
        arg(&a),
        "eval",
        "--checkpoint",
        arg(&student),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let progressive = rows
        .iter()
        .find(|r| r.seed == 0 && r.method == "progressive")
        .unwrap();
    assert_eq!(line["top1"].as_f64(), progressive.student_top1);

    let report = tmp.path().join("report");
    let out = proxykd(&[
        "--out",
        arg(&report),
        "tabulate",
        "--results",
        arg(tmp.path()),
    ]);
    assert_eq!(out.status.code(), Some(0));
    let table = fs::read_to_string(report.join("table.csv")).unwrap();
    let progressive = table
        .lines()
        .find(|l| l.starts_with("progressive,"))
        .unwrap();
    assert!(progressive.starts_with("progressive,4,"), "{progressive}");
}

#[test]
fn empty_results_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    let out = proxykd(&["--out", arg(tmp.path()), "tabulate"]);
    assert_ne!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no"));
}

#[test]
fn feature_dumps_give_a_gap_directly() {
    let tmp = tempfile::tempdir().unwrap();
    let (b, t) = (tmp.path().join("b.csv"), tmp.path().join("t.csv"));
    fs::write(&b, "0,0\n1,0\n0,1\n1,1\n").unwrap();
    fs::write(&t, "5,5\n6,5\n5,6\n").unwrap();
    let out = proxykd(&[
        "--out",
        arg(tmp.path()),
        "domain-gap",
        "--broad-features",
        arg(&b),
        "--target-features",
        arg(&t),
    ]);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let line: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let mmd = line["mmd"].as_f64().unwrap();
    assert!(mmd > 0.0);
    assert!((line["mmd_x100"].as_f64().unwrap() - 100.0 * mmd).abs() < 1e-9);
    assert!(tmp.path().join("domain_gap_features.csv").is_file());
}

#[test]
fn output_root_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config();
    cfg.seeds = vec![0];
    let path = write_config(tmp.path(), &cfg);
    let root = tmp.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_proxykd"))
        .args(["--config", arg(&path), "gen-data", "--domain", "target"])
        .env("PROXYKD_OUTPUT_ROOT", &root)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(root.join("data/target/train.pxd").is_file());
}

#[test]
fn shipped_configs_parse_and_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            seen += 1;
        }
    }
    assert!(seen >= 1);
}
