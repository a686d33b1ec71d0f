//! Stage 2: RA labels the unlabeled corpus, each pseudo query is scored by
//! its best similarity to QP's own outputs, and instances at or above the
//! threshold train QP (and optionally RA).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_model_input, Dataset, DialogueInstance, Role};
use crate::error::{Error, Result};
use crate::seq2seq::{DecodeConfig, Seq2Seq, StageTag};
use crate::stage1::{fit, Selection, StageContext, TrainConfig, TrainOutcome};
use crate::textmetrics::{similarity, FsimConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Generator {
    Ra,
    Qp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PseudoInstance {
    pub history_input: String,
    pub pseudo_query: String,
    pub similarity_score: f64,
    pub generator: Generator,
    pub source_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub alpha: f64,
    /// Number of QP outputs compared against each pseudo query.
    pub n_qp: usize,
    pub fsim: FsimConfig,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            alpha: 1.0,
            n_qp: 1,
            fsim: FsimConfig::default(),
        }
    }
}

impl SelectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("selection: alpha {} outside [0, 1]", self.alpha)));
        }
        if self.n_qp == 0 {
            return Err(Error::Config("selection: n_qp must be at least 1".into()));
        }
        self.fsim.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Continue training the Stage-1 checkpoint.
    Finetune,
    /// Train freshly initialized parameters on the pseudo instances only.
    Retrain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Target {
    Qp,
    Ra,
    Both,
}

/// Which pseudo instances train RA in Stage 2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RaSelection {
    /// The same similarity-selected set QP trains on.
    Similarity,
    /// Instances whose pseudo query QP itself generates with probability
    /// `exp(f_qp) >= min_prob`.
    QpProb { min_prob: f64 },
}

impl Default for RaSelection {
    fn default() -> Self {
        RaSelection::Similarity
    }
}

/// RA's greedy query for the response-augmented input, or `None` when the
/// decode is empty.
pub fn generate_pseudo_query<M: Seq2Seq>(ra: &M, inst: &DialogueInstance, ctx: &StageContext) -> Result<Option<String>> {
    let q = ra.greedy(&build_model_input(inst, Role::Ra, &ctx.format)?)?.text;
    if q.trim().is_empty() {
        log::debug!("instance {}: empty pseudo query, skipped", inst.id);
        return Ok(None);
    }
    Ok(Some(q))
}

/// QP's beam outputs compared against pseudo queries.
pub fn qp_outputs<M: Seq2Seq>(qp: &M, history_input: &str, n: usize) -> Result<Vec<String>> {
    let cfg = DecodeConfig::beam(DecodeConfig::DEFAULT_BEAM.max(n), n);
    Ok(qp.generate(history_input, &cfg)?.into_iter().map(|q| q.text).collect())
}

/// `s(q̄)`: the best similarity between `pseudo` and QP's `n_qp` outputs on the
/// history-only input.
pub fn score_pseudo_query<M: Seq2Seq>(
    qp: &M,
    inst: &DialogueInstance,
    pseudo: &str,
    cfg: &SelectionConfig,
    ctx: &StageContext,
) -> Result<f64> {
    let outputs = qp_outputs(qp, &build_model_input(inst, Role::Qp, &ctx.format)?, cfg.n_qp)?;
    max_similarity(pseudo, &outputs, cfg, ctx)
}

pub fn max_similarity(pseudo: &str, outputs: &[String], cfg: &SelectionConfig, ctx: &StageContext) -> Result<f64> {
    let mut best: f64 = 0.0;
    for o in outputs {
        best = best.max(similarity(pseudo, o, &cfg.fsim, ctx.tokenizer)?);
    }
    Ok(best)
}

/// Labels every unlabeled instance with RA and scores it against QP. Empty
/// decodes are dropped.
pub fn label_unlabeled<M: Seq2Seq>(
    qp: &M,
    ra: &M,
    unlabeled: &Dataset,
    cfg: &SelectionConfig,
    ctx: &StageContext,
) -> Result<Vec<PseudoInstance>> {
    cfg.validate()?;
    unlabeled.require_responses()?;
    let mut out = Vec::with_capacity(unlabeled.len());
    let mut skipped = 0;
    for inst in &unlabeled.instances {
        let Some(q) = generate_pseudo_query(ra, inst, ctx)? else {
            skipped += 1;
            continue;
        };
        let history_input = build_model_input(inst, Role::Qp, &ctx.format)?;
        let outputs = qp_outputs(qp, &history_input, cfg.n_qp)?;
        out.push(PseudoInstance {
            similarity_score: max_similarity(&q, &outputs, cfg, ctx)?,
            history_input,
            pseudo_query: q,
            generator: Generator::Ra,
            source_id: inst.id.clone(),
        });
    }
    if skipped > 0 {
        log::info!("{skipped} instances skipped for empty pseudo queries");
    }
    Ok(out)
}

/// Instances with `similarity_score >= alpha`, in input order.
pub fn select_instances(scored: &[PseudoInstance], alpha: f64) -> Vec<PseudoInstance> {
    scored.iter().filter(|p| p.similarity_score >= alpha).cloned().collect()
}

pub fn save_pseudo_jsonl(items: &[PseudoInstance], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in items {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_pseudo_jsonl(path: impl AsRef<Path>) -> Result<Vec<PseudoInstance>> {
    let path = path.as_ref();
    let mut out = vec![];
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Stage2Output<M> {
    pub qp: Option<TrainOutcome<M>>,
    pub ra: Option<TrainOutcome<M>>,
}

/// Trains one model on `(input, pseudo query)` pairs under `strategy`.
pub(crate) fn train_on_pseudo<M: Seq2Seq>(
    init: &M,
    role: Role,
    pairs: &[(String, String)],
    strategy: Strategy,
    cfg: &TrainConfig,
    dev: &Dataset,
    tag: StageTag,
    ctx: &StageContext,
) -> Result<TrainOutcome<M>> {
    let (start, include_initial) = match strategy {
        Strategy::Finetune => (init.clone(), true),
        Strategy::Retrain => (init.reinitialized(cfg.seed), false),
    };
    fit(
        start,
        pairs,
        cfg,
        Selection {
            role,
            dev,
            include_initial,
        },
        tag,
        ctx,
    )
}

pub struct Stage2Inputs<'a> {
    /// Selected pseudo instances (QP's training set).
    pub selected: &'a [PseudoInstance],
    /// Every scored pseudo instance; only read for QP-probability RA selection.
    pub scored: &'a [PseudoInstance],
    /// The corpus the pseudo instances came from, for rebuilding RA inputs.
    pub unlabeled: &'a Dataset,
    pub dev: &'a Dataset,
}

/// Stage 2 training of QP and/or RA on RA-labeled pseudo instances.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2<M: Seq2Seq>(
    qp: &M,
    ra: &M,
    inputs: Stage2Inputs<'_>,
    strategy: Strategy,
    target: Target,
    ra_selection: RaSelection,
    cfg: &TrainConfig,
    ctx: &StageContext,
) -> Result<Stage2Output<M>> {
    if inputs.selected.is_empty() {
        return Err(Error::Config(
            "stage 2: no pseudo instances reached the similarity threshold; lower alpha".into(),
        ));
    }
    if let Some(p) = inputs.selected.iter().find(|p| p.generator != Generator::Ra) {
        return Err(Error::Argument(format!(
            "stage 2 trains on RA pseudo queries only; `{}` came from QP",
            p.source_id
        )));
    }
    let mut out = Stage2Output { qp: None, ra: None };
    if matches!(target, Target::Qp | Target::Both) {
        let pairs: Vec<(String, String)> = inputs
            .selected
            .iter()
            .map(|p| (p.history_input.clone(), p.pseudo_query.clone()))
            .collect();
        out.qp = Some(train_on_pseudo(qp, Role::Qp, &pairs, strategy, cfg, inputs.dev, StageTag::Stage2, ctx)?);
    }
    if matches!(target, Target::Ra | Target::Both) {
        let chosen: Vec<&PseudoInstance> = match ra_selection {
            RaSelection::Similarity => inputs.selected.iter().collect(),
            RaSelection::QpProb { min_prob } => {
                let mut keep = vec![];
                for p in inputs.scored {
                    if qp.score_sequence(&p.history_input, &p.pseudo_query)?.exp() >= min_prob {
                        keep.push(p);
                    }
                }
                keep
            }
        };
        let by_id: BTreeMap<&str, &DialogueInstance> =
            inputs.unlabeled.instances.iter().map(|i| (i.id.as_str(), i)).collect();
        let pairs = chosen
            .iter()
            .map(|p| {
                let inst = by_id
                    .get(p.source_id.as_str())
                    .ok_or_else(|| Error::Argument(format!("pseudo instance source `{}` not in corpus", p.source_id)))?;
                Ok((build_model_input(inst, Role::Ra, &ctx.format)?, p.pseudo_query.clone()))
            })
            .collect::<Result<Vec<_>>>()?;
        out.ra = Some(train_on_pseudo(ra, Role::Ra, &pairs, strategy, cfg, inputs.dev, StageTag::Stage2, ctx)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pi(score: f64) -> PseudoInstance {
        PseudoInstance {
            history_input: "user: x".into(),
            pseudo_query: "x".into(),
            similarity_score: score,
            generator: Generator::Ra,
            source_id: format!("{score}"),
        }
    }

    #[test]
    fn threshold_examples() {
        let items = vec![pi(1.0), pi(0.6), pi(0.0)];
        assert_eq!(select_instances(&items, 1.0), vec![pi(1.0)]);
        assert_eq!(select_instances(&items, 0.0), items);
        assert_eq!(select_instances(&items, 0.6).len(), 2);
    }

    #[test]
    fn max_over_qp_outputs() {
        let ctx = StageContext::default();
        let cfg = SelectionConfig {
            n_qp: 3,
            ..Default::default()
        };
        let outs = vec!["a b".to_string(), "a".into(), "c".into()];
        assert_eq!(max_similarity("a", &outs, &cfg, &ctx).unwrap(), 1.0);
        assert_eq!(max_similarity("javelin throw", &["bowling".into()], &cfg, &ctx).unwrap(), 0.0);
    }

    #[test]
    fn pseudo_jsonl_round_trip() {
        let items = vec![pi(1.0), pi(0.25)];
        let f = tempfile::NamedTempFile::new().unwrap();
        save_pseudo_jsonl(&items, f.path()).unwrap();
        assert_eq!(load_pseudo_jsonl(f.path()).unwrap(), items);
    }

    #[test]
    fn config_validation() {
        assert!(SelectionConfig { alpha: 1.5, ..Default::default() }.validate().is_err());
        assert!(SelectionConfig { n_qp: 0, ..Default::default() }.validate().is_err());
        assert!(SelectionConfig::default().validate().is_ok());
    }

    mod laws {
        use super::*;
        use proptest::prelude::*;

        const GRID: [f64; 6] = [0.0, 0.1, 0.3, 0.5, 0.8, 1.0];

        proptest! {
            #[test]
            fn sublist_idempotent_monotone(scores in prop::collection::vec(0.0f64..=1.0, 0..40)) {
                let items: Vec<PseudoInstance> = scores.iter().enumerate().map(|(i, &s)| PseudoInstance {
                    source_id: i.to_string(),
                    ..pi(s)
                }).collect();
                let mut prev: Option<Vec<PseudoInstance>> = None;
                for a in GRID {
                    let sel = select_instances(&items, a);
                    let mut it = items.iter();
                    for s in &sel {
                        prop_assert!(it.any(|x| x == s));
                    }
                    prop_assert_eq!(select_instances(&sel, a), sel.clone());
                    if let Some(p) = &prev {
                        prop_assert!(sel.iter().all(|s| p.contains(s)));
                    }
                    prev = Some(sel);
                }
                prop_assert_eq!(select_instances(&items, 0.0), items);
            }
        }
    }
}
