mod common;

use std::path::Path;
use std::process::Command;

use semidqg::config::Config;
use semidqg::pipeline::{latest_run, Manifest, Pipeline, Stage, StageStatus};
use semidqg::seq2seq::CheckpointBundle;

fn smoke(overrides: &[&str]) -> Config {
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    Config::parse(&common::smoke_config_text(), &o).unwrap()
}

fn status(m: &Manifest, name: &str) -> Option<StageStatus> {
    m.stages.iter().find(|s| s.name == name).map(|s| s.status.clone())
}

#[test]
fn pipeline_writes_every_stage_and_a_report() {
    let root = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(smoke(&[]), root.path(), false).unwrap();
    let m = p.run(Stage::Stage3).unwrap();
    for key in ["stage1.qp", "stage1.ra", "stage2.qp", "stage3.qp", "stage3.rl_log", "reports.test", "config"] {
        assert!(m.artifacts[key].exists(), "{key} missing");
    }
    for key in ["stage1.qp", "stage2.qp", "stage3.qp"] {
        let h = CheckpointBundle::read_header(&m.artifacts[key]).unwrap();
        assert_eq!(h.config_hash, m.config_hash);
    }
    assert_eq!(m.final_model.as_deref(), Some("stage3.qp"));
    let report = m.final_report.unwrap();
    assert!(report.scores.contains_key("uni_f1") && report.scores.contains_key("recall@3"));
    assert!(m.run_dir.file_name().unwrap().to_string_lossy().starts_with(&m.config_hash));

    let frozen = Config::load(&m.artifacts["config"], &[]).unwrap();
    assert_eq!(frozen, *p.config());
    assert_eq!(frozen.hash(), m.config_hash);
    let written: Manifest = serde_json::from_slice(&std::fs::read(m.run_dir.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(written.config_hash, m.config_hash);
}

#[test]
fn resume_reuses_completed_stages() {
    let root = tempfile::tempdir().unwrap();
    let first = Pipeline::open(smoke(&[]), root.path(), false).unwrap().run(Stage::Stage3).unwrap();
    let mut again = Pipeline::open(smoke(&[]), root.path(), true).unwrap();
    let second = again.run(Stage::Stage3).unwrap();
    assert_eq!(second.run_dir, first.run_dir);
    for stage in ["stage1", "stage2", "stage3", "baselines"] {
        assert_eq!(status(&second, stage), Some(StageStatus::Reused), "{stage}");
    }
    assert_eq!(second.final_report, first.final_report);

    // A different configuration never picks up this run.
    let other = smoke(&["stage3.steps=10"]);
    assert!(latest_run(root.path(), &other.hash()).unwrap().is_none());
}

#[test]
fn resume_stops_at_the_last_completed_stage() {
    let root = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(smoke(&[]), root.path(), false).unwrap();
    p.stage2().unwrap();
    let dir = p.dir().to_path_buf();
    // Plant a Stage-2 checkpoint where Stage 3 belongs: the tag must not match.
    std::fs::create_dir_all(dir.join("stage3")).unwrap();
    std::fs::copy(dir.join("stage2/qp.ckpt"), dir.join("stage3/qp.ckpt")).unwrap();

    let mut resumed = Pipeline::open(smoke(&[]), root.path(), true).unwrap();
    assert_eq!(resumed.dir(), dir);
    let m = resumed.run(Stage::Stage3).unwrap();
    assert_eq!(status(&m, "stage1"), Some(StageStatus::Reused));
    assert_eq!(status(&m, "stage2"), Some(StageStatus::Reused));
    assert_eq!(status(&m, "stage3"), Some(StageStatus::Ran));
    let h = CheckpointBundle::read_header(dir.join("stage3/qp.ckpt")).unwrap();
    assert_eq!(h.stage_tag, semidqg::seq2seq::StageTag::Stage3);
}

#[test]
fn file_source_reads_saved_splits() {
    let root = tempfile::tempdir().unwrap();
    let mut p = Pipeline::open(smoke(&["stage3.enabled=false"]), root.path(), false).unwrap();
    let data = p.dir().join("data");
    p.corpus().unwrap();
    let path = |n: &str| data.join(format!("{n}.jsonl")).display().to_string();
    let cfg = smoke(&[
        "data.source=files",
        &format!("data.labeled={}", path("labeled")),
        &format!("data.unlabeled={}", path("unlabeled")),
        &format!("data.dev={}", path("dev")),
        &format!("data.test={}", path("test")),
        &format!("data.documents={}", path("documents")),
        "stage3.enabled=false",
    ]);
    let mut q = Pipeline::open(cfg, root.path(), false).unwrap();
    let m = q.run(Stage::Stage3).unwrap();
    assert_eq!(m.final_model.as_deref(), Some("stage2.qp"));
    assert!(m.final_report.unwrap().scores.contains_key("recall@3"));
}

fn cli(args: &[&str], run_dir: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_semidqg"))
        .args(args)
        .env("SEMIDQG_RUN_DIR", run_dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn cli_lists_every_missing_key() {
    let root = tempfile::tempdir().unwrap();
    let out = cli(&["pipeline"], root.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("scenario, seed, data.source"), "{err}");

    let cfg = root.path().join("files.toml");
    std::fs::write(&cfg, "scenario = \"low_resource\"\nseed = 1\n[data]\nsource = \"files\"\n").unwrap();
    let out = cli(&["stage1", "--config", cfg.to_str().unwrap()], root.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("data.labeled, data.unlabeled, data.dev, data.test"), "{err}");
}

#[test]
fn cli_pipeline_prints_the_manifest() {
    let root = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.toml");
    let args = ["pipeline", "--config", config.to_str().unwrap(), "--scenario", "low-resource", "--seed", "4"];
    let out = cli(&args, root.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let m: Manifest = serde_json::from_slice(&out.stdout).unwrap();
    assert!(m.run_dir.starts_with(root.path()));
    assert!(m.final_report.is_some());
    let frozen = Config::load(&m.artifacts["config"], &[]).unwrap();
    assert_eq!(frozen.seed, 4);
    assert_eq!(frozen.stage2.strategy, Some(semidqg::stage2::Strategy::Retrain));
    assert_eq!(frozen.stage3.n_candidates, Some(3));

    // Stepwise commands reopen the same run.
    let out = cli(&["analyze", "--config", config.to_str().unwrap(), "--scenario", "low-resource", "--seed", "4"], root.path());
    assert!(out.status.success());
    let a: Manifest = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(a.run_dir, m.run_dir);
    assert!(a.artifacts["reports.ranking"].exists());
}

#[test]
fn shipped_and_documented_configs_parse() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../..");
    for name in ["configs/synth.toml", "configs/smoke.toml"] {
        Config::load(root.join(name), &[]).unwrap();
    }
    let chapter = std::fs::read_to_string(root.join("book/src/configuration.md")).unwrap();
    let block = chapter.split("```toml\n").nth(1).unwrap().split("```").next().unwrap();
    let cfg = Config::parse(block, &[]).unwrap();
    assert_eq!(cfg.stage2.target, semidqg::stage2::Target::Both);
    assert_eq!(cfg.eval.metrics.len(), 8);
}
