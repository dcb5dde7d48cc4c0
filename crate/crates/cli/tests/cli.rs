use std::path::Path;
use std::process::Command;

use declineforge_cli::config::PipelineConfig;
use declineforge_cli::{
    cmd_cluster, cmd_evaluate, cmd_pretrain, cmd_run_all, cmd_split, cmd_synth, CliError, EvaluationResults,
    Outcome, Pipeline, RunManifest, Stage,
};
use declineforge_core::models::{ViTConfig, VitModel};
use declineforge_core::synthcohort::NoiseLevels;
use declineforge_core::TrainConfig;

fn tiny(ws: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::smoke(ws);
    let dims = [16; 3];
    cfg.cohort.n_subjects = 40;
    cfg.cohort.volume_dims = dims;
    cfg.pretraining.vit = ViTConfig { vol_dims: dims, patch_size: 8, embed_dim: 16, depth: 1, heads: 2, ..ViTConfig::default() };
    cfg.pretraining.train = TrainConfig { epochs: 2, learning_rate: 1e-3, batch_size: 8, ..TrainConfig::default() };
    cfg.pretraining.monitor_count = 2;
    cfg.clustering.k_max = 5;
    cfg.clustering.kmeans.restarts = 2;
    cfg.classifiers.gbt.n_rounds = 10;
    cfg.classifiers.fc_head.train.epochs = 5;
    cfg.classifiers.cnn.train.epochs = 1;
    cfg.classifiers.tabular_ae.train.epochs = 10;
    cfg.evaluation.repetitions = 1;
    cfg
}

fn read(ws: &Path, rel: &str) -> String {
    std::fs::read_to_string(ws.join(rel)).unwrap()
}

fn data_lines(ws: &Path, rel: &str) -> usize {
    read(ws, rel).lines().skip(1).filter(|l| !l.is_empty()).count()
}

#[test]
fn synth_writes_one_artifact_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_synth(&cfg, false).unwrap();
    let ws = dir.path();
    let subjects: std::collections::BTreeSet<String> =
        read(ws, "synth/trajectories.csv").lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect();
    assert_eq!(subjects.len(), 40);
    assert_eq!(data_lines(ws, "synth/tabular.csv"), 40);
    assert_eq!(data_lines(ws, "synth/truth.csv"), 40);
    assert_eq!(std::fs::read_dir(ws.join("synth/volumes")).unwrap().count(), 40);
}

#[test]
fn rerun_refuses_without_force_and_reproduces_with_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_synth(&cfg, false).unwrap();
    let before = read(dir.path(), "synth/trajectories.csv");
    let tab = read(dir.path(), "synth/tabular.csv");
    let err = cmd_synth(&cfg, false).unwrap_err();
    assert!(matches!(err, CliError::Collision { stage: "synth", .. }));
    assert_eq!(err.exit_code(), 2);
    cmd_synth(&cfg, true).unwrap();
    assert_eq!(read(dir.path(), "synth/trajectories.csv"), before);
    assert_eq!(read(dir.path(), "synth/tabular.csv"), tab);
}

#[test]
fn missing_upstream_is_a_dependency_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let err = cmd_cluster(&cfg, false).unwrap_err();
    assert!(matches!(err, CliError::Dependency { stage: "cluster", missing: "synth" }), "{err}");
    assert_eq!(err.exit_code(), 3);
    assert!(err.to_string().contains("synth"));
    cmd_synth(&cfg, false).unwrap();
    let err = cmd_pretrain(&cfg, false).unwrap_err();
    assert!(matches!(err, CliError::Dependency { missing: "cluster", .. }));
}

#[test]
fn cluster_outputs_and_zero_noise_labels_match_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.cohort.noise = NoiseLevels::zero();
    cmd_synth(&cfg, false).unwrap();
    cmd_cluster(&cfg, false).unwrap();
    let ws = dir.path();
    assert_eq!(data_lines(ws, "cluster/elbow.csv"), cfg.clustering.k_max);
    for svg in ["cluster/elbow.svg", "cluster/trajectories.svg"] {
        assert!(read(ws, svg).starts_with("<svg"));
    }
    let p = Pipeline::new(cfg).unwrap();
    assert_eq!(p.read_labels().unwrap(), p.read_truth().unwrap());
}

#[test]
fn forcing_a_stage_invalidates_downstream() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_synth(&cfg, false).unwrap();
    cmd_cluster(&cfg, false).unwrap();
    cmd_split(&cfg, false).unwrap();
    cmd_cluster(&cfg, true).unwrap();
    let m = RunManifest::read(dir.path()).unwrap().unwrap();
    assert!(m.is_complete(Stage::Cluster));
    assert!(!m.is_complete(Stage::Split));
    assert!(!dir.path().join("split").exists());
}

#[test]
fn run_all_completes_then_is_up_to_date() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let first = cmd_run_all(&cfg, false).unwrap();
    assert!(first.iter().all(|(_, o)| *o == Outcome::Ran));
    let m = RunManifest::read(dir.path()).unwrap().unwrap();
    assert!(m.all_complete());
    assert_eq!(m.config_hash, cfg.hash());
    assert!(m.stages[&Stage::Synth].seeds.contains_key("cohort"));
    let second = cmd_run_all(&cfg, false).unwrap();
    assert_eq!(second.len(), Stage::ALL.len());
    assert!(second.iter().all(|(_, o)| *o == Outcome::UpToDate));

    let ws = dir.path();
    assert_eq!(data_lines(ws, "pretrain/history.csv"), cfg.pretraining.train.epochs);
    let model = VitModel::load(ws.join("pretrain/encoder.ckpt")).unwrap();
    assert_eq!(model.cfg, cfg.pretraining.vit);
    let results = EvaluationResults::load(ws).unwrap();
    let labels = ["Stable", "Mild", "Moderate", "Severe"];
    for t in [&results.table1, &results.table2] {
        for (_, r) in &t.rows {
            for c in 0..4 {
                let cell = r.cell(c);
                assert!(cell == "n/a" || cell.ends_with("± 0.00"), "{cell}");
            }
        }
        let csv = t.to_csv();
        let classes: Vec<&str> = csv.lines().skip(1).take(4).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(classes, labels);
    }
    assert!(read(ws, "report/report.md").contains("Adjusted Rand index"));
}

#[test]
fn five_repetitions_format_every_cell() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.evaluation.repetitions = 5;
    cfg.evaluation.resplit = true;
    cmd_run_all(&cfg, false).unwrap();
    let text = read(dir.path(), "evaluate/table2.txt");
    let re_cell = |s: &str| {
        let b = s.as_bytes();
        s.len() == 11 && b[1] == b'.' && b[4] == b' ' && s[5..].starts_with("± ") && b[9] == b'.'
    };
    let mut cells = 0;
    for line in text.lines().skip(3) {
        for (i, _) in line.match_indices(" ± ") {
            let cell = &line[i - 4..i + 7];
            assert!(re_cell(cell), "{cell:?}");
            cells += 1;
        }
    }
    assert!(cells > 0);
    assert_eq!(data_lines(dir.path(), "evaluate/runs.csv"), 5 * 8 * 4);
}

#[test]
fn corrupted_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_synth(&cfg, false).unwrap();
    std::fs::write(dir.path().join("manifest.json"), "{ not json").unwrap();
    let err = cmd_run_all(&cfg, false).unwrap_err();
    assert!(matches!(err, CliError::CorruptManifest { .. }), "{err}");
    assert_eq!(err.exit_code(), 2);
    assert!(dir.path().join("synth/truth.csv").exists());
}

#[test]
fn changed_config_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    cmd_synth(&cfg, false).unwrap();
    let other = PipelineConfig { seed: 9, ..cfg };
    let err = cmd_run_all(&other, false).unwrap_err();
    assert!(matches!(err, CliError::Config(_)), "{err}");
}

#[test]
fn divergence_maps_to_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.pretraining.train.learning_rate = 1e200;
    cfg.pretraining.train.epochs = 3;
    cmd_synth(&cfg, false).unwrap();
    cmd_cluster(&cfg, false).unwrap();
    cmd_split(&cfg, false).unwrap();
    let err = cmd_pretrain(&cfg, false).unwrap_err();
    assert!(matches!(err, CliError::Diverged { stage: "pretrain", .. }), "{err}");
    assert_eq!(err.exit_code(), 4);
    let err = cmd_evaluate(&cfg, false).unwrap_err();
    assert!(matches!(err, CliError::Dependency { missing: "pretrain", .. }));
}

#[test]
fn config_files_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    let smoke = PipelineConfig::load(root.join("configs/smoke.json")).unwrap();
    assert_eq!(smoke, PipelineConfig::smoke("runs/smoke"));
    let full = PipelineConfig::load(root.join("configs/default.json")).unwrap();
    assert_eq!(full.clustering.kmeans.k, 4);
    assert_eq!(full.pretraining.train.epochs, 200);
    assert_eq!(full.pretraining.train.learning_rate, 1e-4);
    assert_eq!(full.classifiers.cnn.head_lr, 1e-2);
    assert_eq!(full.split.test_ratio, 0.2);
    assert_eq!((full.reduction.variance_target, full.reduction.max_components), (0.95, 15));
    assert_eq!(full.evaluation.repetitions, 5);
    assert_eq!(PipelineConfig::from_json("{}").unwrap(), PipelineConfig::default());
}

#[test]
fn invalid_configs_are_rejected() {
    for bad in [
        r#"{"evaluation": {"repetitions": 0}}"#,
        r#"{"clustering": {"kmeans": {"k": 3}}}"#,
        r#"{"split": {"test_ratio": 1.5}}"#,
        r#"{"cohort": {"volume_dims": [8, 8, 8]}}"#,
        "[1, 2",
    ] {
        let err = PipelineConfig::from_json(bad).unwrap_err();
        assert_eq!(err.exit_code(), 2, "{bad}: {err}");
    }
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_declineforge"))
}

#[test]
fn binary_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ws = dir.path().join("ws");
    let cfg_path = dir.path().join("cfg.json");
    std::fs::write(&cfg_path, tiny(&ws).to_json()).unwrap();
    let run = |args: &[&str]| {
        binary().args(args).arg("--config").arg(&cfg_path).env("RUST_LOG", "warn").output().unwrap()
    };

    assert_eq!(run(&["cluster"]).status.code(), Some(3));
    assert_eq!(run(&["synth"]).status.code(), Some(0));
    assert_eq!(run(&["synth"]).status.code(), Some(2));
    assert_eq!(run(&["synth", "--force"]).status.code(), Some(0));

    let other = dir.path().join("other");
    let out = binary()
        .args(["synth", "--seed", "5", "--workspace"])
        .arg(&other)
        .arg("--config")
        .arg(&cfg_path)
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert_ne!(
        std::fs::read(other.join("synth/trajectories.csv")).unwrap(),
        std::fs::read(ws.join("synth/trajectories.csv")).unwrap()
    );

    let out = run(&["run-all"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&["run-all"]);
    assert!(String::from_utf8_lossy(&out.stdout).contains("up to date"));

    std::fs::write(&cfg_path, "{ broken").unwrap();
    assert_eq!(run(&["synth"]).status.code(), Some(2));
}
