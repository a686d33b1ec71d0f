//! Run configuration: one TOML file covering every knob, scenario-dependent
//! defaults, `key=value` overrides and the configuration hash that names run
//! directories and stamps checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::InputFormat;
use crate::error::{Error, Result};
use crate::seq2seq::checkpoint::sha256_hex;
use crate::seq2seq::ModelDims;
use crate::stage1::{StageContext, TrainConfig};
use crate::stage2::{RaSelection, SelectionConfig, Strategy, Target};
use crate::stage3::{RLConfig, RewardKind};
use crate::synthbench::SynthConfig;
use crate::textmetrics::{FsimConfig, Tokenizer};

/// Keys every configuration file must set.
pub const REQUIRED_KEYS: [&str; 3] = ["scenario", "seed", "data.source"];

/// Keys additionally required when `data.source = "files"`.
pub const FILE_KEYS: [&str; 4] = ["data.labeled", "data.unlabeled", "data.dev", "data.test"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// Labeled source domain, unlabeled target domain: Stage 2 fine-tunes.
    CrossDomain,
    /// Few labeled in-domain instances: Stage 2 retrains from scratch.
    LowResource,
}

impl Scenario {
    pub fn strategy(self) -> Strategy {
        match self {
            Scenario::CrossDomain => Strategy::Finetune,
            Scenario::LowResource => Strategy::Retrain,
        }
    }

    pub fn alpha(self) -> f64 {
        1.0
    }

    pub fn n_candidates(self) -> usize {
        match self {
            Scenario::CrossDomain => 10,
            Scenario::LowResource => 3,
        }
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross_domain" => Ok(Scenario::CrossDomain),
            "low_resource" => Ok(Scenario::LowResource),
            other => Err(Error::Config(format!(
                "unknown scenario `{other}` (expected cross_domain or low_resource)"
            ))),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scenario::CrossDomain => "cross_domain",
            Scenario::LowResource => "low_resource",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Generate a synthetic corpus from `data.synth`.
    Synth,
    /// Read JSONL files.
    Files,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub source: DataSource,
    #[serde(default)]
    pub synth: SynthConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labeled: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unlabeled: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dev: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Search documents (`{"title", "body"}` lines) for Recall@k.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub documents: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    /// Scenario default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    pub n_qp: usize,
    pub fsim: FsimConfig,
    /// Scenario default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub strategy: Option<Strategy>,
    pub target: Target,
    pub ra_selection: RaSelection,
    pub train: TrainConfig,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            alpha: None,
            n_qp: 1,
            fsim: FsimConfig::default(),
            strategy: None,
            target: Target::Both,
            ra_selection: RaSelection::default(),
            train: TrainConfig::default(),
        }
    }
}

impl Stage2Config {
    pub fn selection(&self) -> SelectionConfig {
        SelectionConfig {
            alpha: self.alpha.unwrap_or(1.0),
            n_qp: self.n_qp,
            fsim: self.fsim.clone(),
        }
    }

    pub fn strategy(&self) -> Strategy {
        self.strategy.unwrap_or(Strategy::Finetune)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    pub enabled: bool,
    /// Scenario default when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_candidates: Option<usize>,
    pub reward_kind: RewardKind,
    pub lr: f64,
    pub steps: usize,
    pub eval_every: usize,
}

impl Default for Stage3Config {
    fn default() -> Self {
        let rl = RLConfig::default();
        Stage3Config {
            enabled: true,
            n_candidates: None,
            reward_kind: rl.reward_kind,
            lr: rl.lr,
            steps: rl.steps,
            eval_every: rl.eval_every,
        }
    }
}

/// Self-training and KD. They train with the Stage-2 settings so that every
/// comparison shares one budget.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Metric names as in reports (`uni_f1`, `bleu1`, ..., `recall@3`).
    pub metrics: Vec<String>,
    pub bleu_smoothing: bool,
    /// Candidate pool size of the ranking analysis.
    pub ranking_candidates: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: ["uni_f1", "bleu1", "bleu2", "rouge1", "rouge2", "rougeL"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            bleu_smoothing: false,
            ranking_candidates: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Config {
    pub scenario: Scenario,
    /// Drives every seed of the run: corpus generation, initialization,
    /// shuffling and policy sampling.
    pub seed: u64,
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelDims,
    #[serde(default)]
    pub format: InputFormat,
    #[serde(default)]
    pub tokenizer: Tokenizer,
    #[serde(default)]
    pub stage1: TrainConfig,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub stage3: Stage3Config,
    #[serde(default)]
    pub baselines: BaselineConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl Config {
    /// Reads a configuration file and applies `key=value` overrides.
    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, overrides).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Parses TOML text, applies overrides, checks required keys and fills
    /// scenario defaults. The result is the effective configuration.
    pub fn parse(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let missing = missing_keys(&value);
        if !missing.is_empty() {
            return Err(Error::MissingKeys(missing));
        }
        let cfg: Config = toml::Value::Table(value)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let cfg = cfg.resolved();
        cfg.validate()?;
        Ok(cfg)
    }

    /// Fills scenario defaults and propagates the top-level seed.
    pub fn resolved(mut self) -> Self {
        let s = self.scenario;
        self.stage2.alpha.get_or_insert(s.alpha());
        self.stage2.strategy.get_or_insert(s.strategy());
        self.stage3.n_candidates.get_or_insert(s.n_candidates());
        self.data.synth.seed = self.seed;
        self.stage1.seed = self.seed;
        self.stage2.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.source == DataSource::Synth {
            self.data.synth.validate()?;
        }
        self.stage1.validate()?;
        self.stage2.train.validate()?;
        self.stage2.selection().validate()?;
        if self.stage3.enabled {
            self.rl().validate()?;
        }
        for m in &self.eval.metrics {
            crate::eval::Metric::from_name(m)?;
        }
        Ok(())
    }

    pub fn rl(&self) -> RLConfig {
        RLConfig {
            n_candidates: self.stage3.n_candidates.unwrap_or(self.scenario.n_candidates()),
            reward_kind: self.stage3.reward_kind,
            lr: self.stage3.lr,
            steps: self.stage3.steps,
            seed: self.seed,
            eval_every: self.stage3.eval_every,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("configuration serializes")
    }

    /// Short hex digest of the effective configuration.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("configuration serializes");
        sha256_hex(&canonical)[..12].to_string()
    }

    pub fn stage_context(&self) -> StageContext {
        StageContext {
            format: self.format.clone(),
            tokenizer: self.tokenizer,
            config_hash: self.hash(),
        }
    }
}

fn lookup<'a>(table: &'a toml::Table, dotted: &str) -> Option<&'a toml::Value> {
    let mut parts = dotted.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

/// Every required key absent from `table`, in a stable order.
pub fn missing_keys(table: &toml::Table) -> Vec<String> {
    let mut missing: Vec<String> = REQUIRED_KEYS
        .iter()
        .filter(|k| lookup(table, k).is_none())
        .map(|k| k.to_string())
        .collect();
    if lookup(table, "data.source").and_then(|v| v.as_str()) == Some("files") {
        missing.extend(FILE_KEYS.iter().filter(|k| lookup(table, k).is_none()).map(|k| k.to_string()));
    }
    missing
}

/// Applies one `dotted.key=value` override. The value is read as a TOML
/// value when possible and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() || key.split('.').any(str::is_empty) {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}
