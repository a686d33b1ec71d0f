//! End-to-end runs: corpus, the three stages, baselines, evaluation and
//! analysis, with every artifact written under one run directory.
//!
//! A run directory is named `<config hash>-<UTC timestamp>` and lives under
//! `$SEMIDQG_RUN_DIR` (default `runs`). It holds the frozen effective
//! configuration, so a run can be repeated exactly. With `resume`, the newest
//! directory of the same configuration is reopened and every stage whose
//! checkpoints carry the right stage tag and configuration hash is loaded
//! instead of retrained.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::baselines::{distill_kd, self_train, SelfTrainVariant};
use crate::config::{Config, DataSource};
use crate::corpus::{load_jsonl, save_jsonl, Dataset, Role};
use crate::error::{Error, Result};
use crate::eval::{
    evaluate, load_documents, ranking_analysis_with, Document, EvalOptions, GoldTies, Metric, MetricReport,
    RankingReport, TfIdfIndex,
};
use crate::seq2seq::{load_checkpoint, CheckpointBundle, Seq2Seq, StageTag, TinySeq2Seq, Vocab};
use crate::stage1::{train_supervised, StageContext, TrainOutcome};
use crate::stage2::{label_unlabeled, save_pseudo_jsonl, select_instances, train_stage2, Stage2Inputs, Target};
use crate::stage3::train_stage3;
use crate::synthbench::{documents, generate_corpus};

pub const RUN_DIR_ENV: &str = "SEMIDQG_RUN_DIR";
pub const DEFAULT_RUN_ROOT: &str = "runs";

/// The last training stage a run goes through.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Stage1,
    Stage2,
    Stage3,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub documents: Option<Vec<Document>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Reused,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
}

/// Everything a run produced, printed as JSON when a command finishes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub run_dir: PathBuf,
    pub config_hash: String,
    pub stages: Vec<StageRecord>,
    pub artifacts: BTreeMap<String, PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_model: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub final_report: Option<MetricReport>,
}

/// Ranking analysis under both gold tie rules.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Analysis {
    pub by_qp: RankingReport,
    pub mid_rank: RankingReport,
}

type Model = TinySeq2Seq;

pub struct Pipeline {
    cfg: Config,
    ctx: StageContext,
    dir: PathBuf,
    corpus: Option<Corpus>,
    models: BTreeMap<&'static str, Model>,
    stages: Vec<StageRecord>,
    artifacts: BTreeMap<String, PathBuf>,
    final_model: Option<String>,
    final_report: Option<MetricReport>,
}

/// `$SEMIDQG_RUN_DIR`, or `runs` when unset.
pub fn default_run_root() -> PathBuf {
    std::env::var_os(RUN_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT))
}

/// Newest run directory of the configuration with `hash`, if any.
pub fn latest_run(root: &Path, hash: &str) -> Result<Option<PathBuf>> {
    if !root.exists() {
        return Ok(None);
    }
    let prefix = format!("{hash}-");
    let mut found: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir() && e.file_name().to_string_lossy().starts_with(&prefix))
        .map(|e| e.path())
        .collect();
    found.sort();
    Ok(found.pop())
}

fn fresh_dir(root: &Path, hash: &str) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S");
    let base = root.join(format!("{hash}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 1;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

impl Pipeline {
    /// Opens a run directory under `root` (see [`default_run_root`]). With
    /// `resume`, the newest directory of this configuration is reused when
    /// one exists.
    pub fn open(cfg: Config, root: &Path, resume: bool) -> Result<Self> {
        let hash = cfg.hash();
        let existing = if resume { latest_run(root, &hash)? } else { None };
        let dir = match existing {
            Some(d) => {
                let frozen = Config::load(d.join("config.toml"), &[])?;
                if frozen.hash() != hash {
                    return Err(Error::Integrity(format!(
                        "{} holds configuration {}, expected {hash}",
                        d.display(),
                        frozen.hash()
                    )));
                }
                log::info!("resuming {}", d.display());
                d
            }
            None => {
                let d = fresh_dir(root, &hash)?;
                fs::write(d.join("config.toml"), cfg.to_toml())?;
                d
            }
        };
        let mut artifacts = BTreeMap::new();
        artifacts.insert("config".to_string(), dir.join("config.toml"));
        Ok(Pipeline {
            ctx: cfg.stage_context(),
            cfg,
            dir,
            corpus: None,
            models: BTreeMap::new(),
            stages: vec![],
            artifacts,
            final_model: None,
            final_report: None,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &Config {
        &self.cfg
    }

    pub fn context(&self) -> &StageContext {
        &self.ctx
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.dir.join(name);
        fs::create_dir_all(&d)?;
        Ok(d)
    }

    fn record(&mut self, name: &str, status: StageStatus) {
        log::info!("{name}: {status:?}");
        self.stages.push(StageRecord {
            name: name.to_string(),
            status,
        });
    }

    /// The run's datasets: generated (and saved) for synthetic runs, read
    /// from the configured files otherwise.
    pub fn corpus(&mut self) -> Result<&Corpus> {
        if self.corpus.is_none() {
            let c = self.load_corpus()?;
            self.corpus = Some(c);
        }
        Ok(self.corpus.as_ref().expect("just loaded"))
    }

    fn load_corpus(&mut self) -> Result<Corpus> {
        let data = self.cfg.data.clone();
        match data.source {
            DataSource::Synth => {
                let dir = self.subdir("data")?;
                let names = ["labeled", "unlabeled", "dev", "test"];
                let paths: Vec<PathBuf> = names.iter().map(|n| dir.join(format!("{n}.jsonl"))).collect();
                let docs_path = dir.join("documents.jsonl");
                let corpus = if paths.iter().all(|p| p.exists()) && docs_path.exists() {
                    self.record("synth", StageStatus::Reused);
                    Corpus {
                        labeled: load_jsonl(&paths[0])?,
                        unlabeled: load_jsonl(&paths[1])?,
                        dev: load_jsonl(&paths[2])?,
                        test: load_jsonl(&paths[3])?,
                        documents: Some(load_documents(&docs_path)?),
                    }
                } else {
                    let c = generate_corpus(&data.synth)?;
                    let docs = documents(&c.topics);
                    for (ds, p) in [&c.labeled, &c.unlabeled, &c.dev, &c.test].into_iter().zip(&paths) {
                        save_jsonl(ds, p)?;
                    }
                    write_jsonl(&docs_path, &docs)?;
                    self.record("synth", StageStatus::Ran);
                    Corpus {
                        labeled: c.labeled,
                        unlabeled: c.unlabeled,
                        dev: c.dev,
                        test: c.test,
                        documents: Some(docs),
                    }
                };
                for (n, p) in names.iter().zip(paths) {
                    self.artifacts.insert(format!("data.{n}"), p);
                }
                self.artifacts.insert("data.documents".into(), docs_path);
                Ok(corpus)
            }
            DataSource::Files => {
                let get = |p: &Option<PathBuf>, key: &str| {
                    p.clone().ok_or_else(|| Error::MissingKeys(vec![format!("data.{key}")]))
                };
                let corpus = Corpus {
                    labeled: load_jsonl(get(&data.labeled, "labeled")?)?,
                    unlabeled: load_jsonl(get(&data.unlabeled, "unlabeled")?)?,
                    dev: load_jsonl(get(&data.dev, "dev")?)?,
                    test: load_jsonl(get(&data.test, "test")?)?,
                    documents: data.documents.as_ref().map(load_documents).transpose()?,
                };
                Ok(corpus)
            }
        }
    }

    /// Loads `path` when it is a checkpoint of this configuration with the
    /// expected stage tag.
    fn completed(&self, path: &Path, tag: StageTag) -> Result<Option<Model>> {
        if !path.exists() {
            return Ok(None);
        }
        match CheckpointBundle::read(path) {
            Ok(b) if b.header.stage_tag == tag && b.header.config_hash == self.ctx.config_hash => {
                Ok(Some(load_checkpoint(&b, Some(&self.ctx.config_hash))?))
            }
            Ok(b) => {
                log::warn!(
                    "{} is a {:?} checkpoint of configuration {}; retraining",
                    path.display(),
                    b.header.stage_tag,
                    b.header.config_hash
                );
                Ok(None)
            }
            Err(e) => {
                log::warn!("{} is unreadable ({e}); retraining", path.display());
                Ok(None)
            }
        }
    }

    fn save(&mut self, key: &'static str, path: PathBuf, outcome: TrainOutcome<Model>) -> Result<()> {
        outcome.bundle.write(&path)?;
        let log_path = path.with_extension("log.json");
        write_json(&log_path, &outcome.log)?;
        self.artifacts.insert(key.to_string(), path);
        self.artifacts.insert(format!("{key}.log"), log_path);
        self.models.insert(key, outcome.model);
        Ok(())
    }

    fn reuse(&mut self, key: &'static str, path: PathBuf, model: Model) {
        let log_path = path.with_extension("log.json");
        if log_path.exists() {
            self.artifacts.insert(format!("{key}.log"), log_path);
        }
        self.artifacts.insert(key.to_string(), path);
        self.models.insert(key, model);
    }

    fn model(&self, key: &str) -> Result<&Model> {
        self.models
            .get(key)
            .ok_or_else(|| Error::Argument(format!("model `{key}` has not been trained in this run")))
    }

    /// Stage 1: supervised QP and RA.
    pub fn stage1(&mut self) -> Result<()> {
        if self.models.contains_key("stage1.qp") {
            return Ok(());
        }
        let dir = self.subdir("stage1")?;
        let (qp_path, ra_path) = (dir.join("qp.ckpt"), dir.join("ra.ckpt"));
        if let (Some(qp), Some(ra)) = (self.completed(&qp_path, StageTag::Stage1)?, self.completed(&ra_path, StageTag::Stage1)?) {
            self.reuse("stage1.qp", qp_path, qp);
            self.reuse("stage1.ra", ra_path, ra);
            self.record("stage1", StageStatus::Reused);
            return Ok(());
        }
        let (cfg, ctx) = (self.cfg.clone(), self.ctx.clone());
        let c = self.corpus()?.clone();
        let vocab = Vocab::from_datasets(&[&c.labeled, &c.unlabeled, &c.dev], &ctx.format)?;
        let init = TinySeq2Seq::new(vocab, cfg.model, cfg.seed);
        let qp = train_supervised(init.clone(), Role::Qp, &c.labeled, &c.dev, &cfg.stage1, &ctx)?;
        let ra = train_supervised(init.reinitialized(cfg.seed.wrapping_add(1)), Role::Ra, &c.labeled, &c.dev, &cfg.stage1, &ctx)?;
        self.save("stage1.qp", qp_path, qp)?;
        self.save("stage1.ra", ra_path, ra)?;
        self.record("stage1", StageStatus::Ran);
        Ok(())
    }

    /// Stage 2: RA pseudo labels, similarity selection, then QP and/or RA
    /// training as configured.
    pub fn stage2(&mut self) -> Result<()> {
        if self.models.contains_key("stage2.done") {
            return Ok(());
        }
        self.stage1()?;
        let dir = self.subdir("stage2")?;
        let target = self.cfg.stage2.target;
        let wants_qp = matches!(target, Target::Qp | Target::Both);
        let wants_ra = matches!(target, Target::Ra | Target::Both);
        let (qp_path, ra_path) = (dir.join("qp.ckpt"), dir.join("ra.ckpt"));
        let qp_done = if wants_qp { self.completed(&qp_path, StageTag::Stage2)? } else { None };
        let ra_done = if wants_ra { self.completed(&ra_path, StageTag::Stage2)? } else { None };
        if qp_done.is_some() == wants_qp && ra_done.is_some() == wants_ra {
            if let Some(m) = qp_done {
                self.reuse("stage2.qp", qp_path, m);
            }
            if let Some(m) = ra_done {
                self.reuse("stage2.ra", ra_path, m);
            }
            for name in ["pseudo", "selected"] {
                let p = dir.join(format!("{name}.jsonl"));
                if p.exists() {
                    self.artifacts.insert(format!("stage2.{name}"), p);
                }
            }
            self.models.insert("stage2.done", self.model("stage1.qp")?.clone());
            self.record("stage2", StageStatus::Reused);
            return Ok(());
        }
        let (cfg, ctx) = (self.cfg.clone(), self.ctx.clone());
        let c = self.corpus()?.clone();
        let (qp1, ra1) = (self.model("stage1.qp")?.clone(), self.model("stage1.ra")?.clone());
        let selection = cfg.stage2.selection();
        let scored = label_unlabeled(&qp1, &ra1, &c.unlabeled, &selection, &ctx)?;
        let selected = select_instances(&scored, selection.alpha);
        log::info!("stage 2: selected {} of {} pseudo instances", selected.len(), scored.len());
        let (pseudo_path, selected_path) = (dir.join("pseudo.jsonl"), dir.join("selected.jsonl"));
        save_pseudo_jsonl(&scored, &pseudo_path)?;
        save_pseudo_jsonl(&selected, &selected_path)?;
        self.artifacts.insert("stage2.pseudo".into(), pseudo_path);
        self.artifacts.insert("stage2.selected".into(), selected_path);
        let out = train_stage2(
            &qp1,
            &ra1,
            Stage2Inputs {
                selected: &selected,
                scored: &scored,
                unlabeled: &c.unlabeled,
                dev: &c.dev,
            },
            cfg.stage2.strategy(),
            target,
            cfg.stage2.ra_selection,
            &cfg.stage2.train,
            &ctx,
        )?;
        if let Some(o) = out.qp {
            self.save("stage2.qp", qp_path, o)?;
        }
        if let Some(o) = out.ra {
            self.save("stage2.ra", ra_path, o)?;
        }
        self.models.insert("stage2.done", qp1);
        self.record("stage2", StageStatus::Ran);
        Ok(())
    }

    /// The newest QP and RA available after Stage 2.
    fn stage2_models(&self) -> Result<(Model, Model)> {
        let qp = self.models.get("stage2.qp").map_or_else(|| self.model("stage1.qp").cloned(), |m| Ok(m.clone()))?;
        let ra = self.models.get("stage2.ra").map_or_else(|| self.model("stage1.ra").cloned(), |m| Ok(m.clone()))?;
        Ok((qp, ra))
    }

    /// Stage 3: RA-guided REINFORCE on the Stage-2 QP. Skipped when disabled.
    pub fn stage3(&mut self) -> Result<()> {
        if !self.cfg.stage3.enabled || self.models.contains_key("stage3.qp") {
            return Ok(());
        }
        self.stage2()?;
        let dir = self.subdir("stage3")?;
        let path = dir.join("qp.ckpt");
        let rl_path = dir.join("rl_log.jsonl");
        if let Some(m) = self.completed(&path, StageTag::Stage3)? {
            self.reuse("stage3.qp", path, m);
            if rl_path.exists() {
                self.artifacts.insert("stage3.rl_log".into(), rl_path);
            }
            self.record("stage3", StageStatus::Reused);
            return Ok(());
        }
        let (cfg, ctx) = (self.cfg.clone(), self.ctx.clone());
        let c = self.corpus()?.clone();
        let (qp, ra) = self.stage2_models()?;
        let out = train_stage3(&qp, &ra, &c.unlabeled, &c.dev, &cfg.rl(), &ctx)?;
        write_jsonl(&rl_path, &out.rl_log)?;
        self.artifacts.insert("stage3.rl_log".into(), rl_path);
        self.save("stage3.qp", path, out.outcome)?;
        self.record("stage3", StageStatus::Ran);
        Ok(())
    }

    /// Self-training variants and KD, all from the Stage-1 models.
    pub fn baselines(&mut self) -> Result<()> {
        self.stage1()?;
        let dir = self.subdir("baselines")?;
        let (cfg, ctx) = (self.cfg.clone(), self.ctx.clone());
        let mut ran = false;
        let jobs: [(&'static str, Option<SelfTrainVariant>); 4] = [
            ("baseline.self_scratch", Some(SelfTrainVariant::Scratch)),
            ("baseline.self_qp", Some(SelfTrainVariant::Qp)),
            ("baseline.self_joint", Some(SelfTrainVariant::Joint)),
            ("baseline.kd", None),
        ];
        for (key, variant) in jobs {
            if self.models.contains_key(key) {
                continue;
            }
            let path = dir.join(format!("{}.ckpt", key.trim_start_matches("baseline.")));
            if let Some(m) = self.completed(&path, StageTag::Baseline)? {
                self.reuse(key, path, m);
                continue;
            }
            let c = self.corpus()?.clone();
            let (qp1, ra1) = (self.model("stage1.qp")?.clone(), self.model("stage1.ra")?.clone());
            let outcome = match variant {
                Some(v) => self_train(v, &qp1, &c.labeled, &c.unlabeled, &c.dev, &cfg.stage2.train, &ctx)?,
                None => distill_kd(&ra1, &qp1, &c.unlabeled, &c.dev, cfg.stage2.strategy(), &cfg.stage2.train, &ctx)?,
            };
            self.save(key, path, outcome)?;
            ran = true;
        }
        self.record("baselines", if ran { StageStatus::Ran } else { StageStatus::Reused });
        Ok(())
    }

    /// Runs the stages up to `through`, the baselines when enabled, and the
    /// test evaluation.
    pub fn run(&mut self, through: Stage) -> Result<Manifest> {
        self.stage1()?;
        if through >= Stage::Stage2 {
            self.stage2()?;
        }
        if through >= Stage::Stage3 {
            self.stage3()?;
        }
        if self.cfg.baselines.enabled {
            self.baselines()?;
        }
        self.evaluate()?;
        self.write_manifest()
    }

    /// Test-set reports for every model trained or reused so far, written to
    /// `reports/test.json`. The final model is the most advanced QP.
    pub fn evaluate(&mut self) -> Result<BTreeMap<String, MetricReport>> {
        let metrics = self
            .cfg
            .eval
            .metrics
            .iter()
            .map(|m| Metric::from_name(m))
            .collect::<Result<Vec<_>>>()?;
        let corpus = self.corpus()?.clone();
        let index = match &corpus.documents {
            Some(docs) => Some(TfIdfIndex::from_documents(docs)),
            None => None,
        };
        let opts = EvalOptions {
            tokenizer: self.ctx.tokenizer,
            bleu_smoothing: self.cfg.eval.bleu_smoothing,
            search: index.as_ref().map(|i| i as _),
            ..EvalOptions::new(&self.ctx.format)
        };
        let mut reports = BTreeMap::new();
        for (key, model) in &self.models {
            if key.ends_with(".done") {
                continue;
            }
            let role = if key.ends_with(".ra") { Role::Ra } else { Role::Qp };
            let role_metrics: Vec<Metric> = match role {
                Role::Ra => metrics.iter().copied().filter(|m| Metric::TEXT.contains(m)).collect(),
                Role::Qp => metrics.clone(),
            };
            let mut r = evaluate(model, role, &corpus.test, &role_metrics, &opts)?;
            r.per_instance = None;
            reports.insert(key.to_string(), r);
        }
        let dir = self.subdir("reports")?;
        let path = dir.join("test.json");
        write_json(&path, &reports)?;
        self.artifacts.insert("reports.test".into(), path);
        self.final_model = ["stage3.qp", "stage2.qp", "stage1.qp"]
            .iter()
            .find(|k| reports.contains_key(**k))
            .map(|k| k.to_string());
        self.final_report = self.final_model.as_ref().map(|k| reports[k].clone());
        Ok(reports)
    }

    /// Ranking analysis of the Stage-1 QP and RA on dev, written to
    /// `reports/ranking.json`.
    pub fn analyze(&mut self) -> Result<Analysis> {
        self.stage1()?;
        let c = self.corpus()?.clone();
        let (qp, ra) = (self.model("stage1.qp")?, self.model("stage1.ra")?);
        let n_c = self.cfg.eval.ranking_candidates;
        let run = |ties| ranking_analysis_with(qp, ra, &c.dev, n_c, &self.ctx.format, self.ctx.tokenizer, ties);
        let analysis = Analysis {
            by_qp: run(GoldTies::ByQp)?,
            mid_rank: run(GoldTies::MidRank)?,
        };
        let path = self.subdir("reports")?.join("ranking.json");
        write_json(&path, &analysis)?;
        self.artifacts.insert("reports.ranking".into(), path);
        Ok(analysis)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            run_dir: self.dir.clone(),
            config_hash: self.ctx.config_hash.clone(),
            stages: self.stages.clone(),
            artifacts: self.artifacts.clone(),
            final_model: self.final_model.clone(),
            final_report: self.final_report.clone(),
        }
    }

    /// Writes `manifest.json` and returns the manifest.
    pub fn write_manifest(&mut self) -> Result<Manifest> {
        let path = self.dir.join("manifest.json");
        self.artifacts.insert("manifest".into(), path.clone());
        let m = self.manifest();
        write_json(&path, &m)?;
        Ok(m)
    }

    /// A trained model by key (`stage1.qp`, `stage2.ra`, `baseline.kd`, ...).
    pub fn trained(&self, key: &str) -> Option<&Model> {
        self.models.get(key)
    }
}
