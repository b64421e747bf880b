use std::fs;
use std::path::Path;

use latent_flow::config::{ExperimentConfig, ExperimentKind};
use latent_flow::pipeline::Pipeline;

fn smoke(kind: ExperimentKind) -> ExperimentConfig {
    ExperimentConfig::default_for(kind).smoke()
}

const ARTIFACTS: &[&str] = &[
    "config.toml",
    "checkpoints/flow.ckpt",
    "logs/flow_loss.csv",
    "trajectories/conditional.csv",
    "trajectories/unconditional.csv",
    "probes/conditional.csv",
    "probes/unconditional.csv",
    "pca/data.csv",
    "pca/conditional_t0.csv",
    "pca/unconditional_t0.csv",
    "roundtrip.csv",
    "transfer.csv",
    "isolation.csv",
    "summary.json",
];

fn assert_artifacts(dir: &Path, extra: &[&str]) {
    for rel in ARTIFACTS.iter().chain(extra) {
        assert!(dir.join(rel).is_file(), "missing {rel}");
    }
}

#[test]
fn gaussian_smoke_run_writes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let summary = Pipeline::new(smoke(ExperimentKind::Gaussians2d), dir.path()).unwrap().run().unwrap();
    assert_artifacts(dir.path(), &["generation.csv"]);
    assert!(!dir.path().join("checkpoints/vae.ckpt").exists());
    assert_eq!(summary.generation.as_ref().unwrap().len(), 4);
    assert_eq!(summary.probes.conditional.times.len(), 11);
    assert!(summary.structure.distance_r2_conditional_t0.is_some());
}

#[test]
fn factor_smoke_run_writes_everything() {
    let dir = tempfile::tempdir().unwrap();
    let summary = Pipeline::new(smoke(ExperimentKind::Factors), dir.path()).unwrap().run().unwrap();
    assert_artifacts(dir.path(), &["checkpoints/vae.ckpt", "logs/vae_loss.csv"]);
    let targets: Vec<&str> = summary.probes.conditional.curves.iter().map(|c| c.target.as_str()).collect();
    assert_eq!(targets, ["r", "g", "b"]);
    assert!(summary.transfer.b_mae.is_some());
}

#[test]
fn csv_artifacts_carry_seed_and_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = smoke(ExperimentKind::Gaussians2d);
    config.seed = 31;
    let summary = Pipeline::new(config, dir.path()).unwrap().run().unwrap();
    for rel in ARTIFACTS.iter().filter(|r| r.ends_with(".csv")) {
        let text = fs::read_to_string(dir.path().join(rel)).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.starts_with("# latent-flow experiment=gaussians2d seed=31"), "{rel}: {first}");
        assert!(first.ends_with(&summary.config_sha256), "{rel}");
        assert!(!text.lines().nth(1).unwrap().starts_with('#'), "{rel} lacks a header row");
    }
}

#[test]
fn granular_stages_reproduce_a_full_run() {
    let config = smoke(ExperimentKind::Factors);
    let full = tempfile::tempdir().unwrap();
    Pipeline::new(config.clone(), full.path()).unwrap().run().unwrap();

    let staged = tempfile::tempdir().unwrap();
    let p = Pipeline::new(config, staged.path()).unwrap();
    p.train_vae().unwrap();
    p.train_flow().unwrap();
    p.report().unwrap();
    for rel in ["summary.json", "checkpoints/vae.ckpt", "checkpoints/flow.ckpt", "probes/conditional.csv"] {
        assert_eq!(
            fs::read(full.path().join(rel)).unwrap(),
            fs::read(staged.path().join(rel)).unwrap(),
            "{rel} differs"
        );
    }
}

#[test]
fn analysis_stages_reuse_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke(ExperimentKind::Factors), dir.path()).unwrap();
    let summary = p.run().unwrap();
    let vae_bytes = fs::read(dir.path().join("checkpoints/vae.ckpt")).unwrap();
    assert_eq!(p.transfer().unwrap(), summary.transfer);
    assert_eq!(p.isolate().unwrap(), summary.isolation);
    let (probes, structure) = p.probe().unwrap();
    assert_eq!(probes, summary.probes);
    assert_eq!(structure, summary.structure);
    assert_eq!(fs::read(dir.path().join("checkpoints/vae.ckpt")).unwrap(), vae_bytes);
}

#[test]
fn missing_checkpoints_name_the_stage_to_run() {
    let dir = tempfile::tempdir().unwrap();
    let p = Pipeline::new(smoke(ExperimentKind::Factors), dir.path()).unwrap();
    let err = p.train_flow().unwrap_err().to_string();
    assert!(err.contains("train-vae"), "{err}");
    let err = p.report().unwrap_err().to_string();
    assert!(err.contains("train-vae") || err.contains("train-flow"), "{err}");
}

#[test]
fn different_seeds_give_different_summaries() {
    let run = |seed| {
        let dir = tempfile::tempdir().unwrap();
        let mut c = smoke(ExperimentKind::Gaussians2d);
        c.seed = seed;
        Pipeline::new(c, dir.path()).unwrap().run().unwrap().to_json()
    };
    assert_eq!(run(3), run(3));
    assert_ne!(run(3), run(4));
}
