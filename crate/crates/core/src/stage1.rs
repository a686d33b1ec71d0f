//! Supervised training of QP and RA on labeled data, plus the shared
//! cross-entropy loop the later stages and baselines reuse.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_model_input, Dataset, InputFormat, Role};
use crate::error::{Error, Result};
use crate::eval::{evaluate, EvalOptions, Metric, MetricReport};
use crate::seq2seq::{save_checkpoint, CheckpointBundle, CheckpointMeta, OptimizerConfig, Seq2Seq, StageTag};
use crate::textmetrics::Tokenizer;

/// Settings shared by every stage of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageContext {
    pub format: InputFormat,
    pub tokenizer: Tokenizer,
    /// Stamped into every checkpoint header.
    pub config_hash: String,
}

impl Default for StageContext {
    fn default() -> Self {
        StageContext {
            format: InputFormat::default(),
            tokenizer: Tokenizer::default(),
            config_hash: "unhashed".into(),
        }
    }
}

impl StageContext {
    pub fn eval_options(&self) -> EvalOptions<'_> {
        EvalOptions {
            tokenizer: self.tokenizer,
            ..EvalOptions::new(&self.format)
        }
    }

    /// Greedy dev evaluation on Unigram F1, the model-selection metric.
    pub fn dev_report<M: Seq2Seq>(&self, model: &M, role: Role, dev: &Dataset) -> Result<MetricReport> {
        evaluate(model, role, dev, &[Metric::UniF1], &self.eval_options())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Dev evaluation period, in epochs.
    pub eval_every: usize,
    /// Dev evaluations without improvement before stopping.
    pub patience: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 3e-5,
            seed: 0,
            eval_every: 1,
            patience: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.eval_every == 0 || self.patience == 0 {
            return Err(Error::Config(
                "train: batch_size, eval_every and patience must be positive".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train: invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalLog {
    pub step: usize,
    pub epoch: usize,
    pub dev: MetricReport,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepLog>,
    pub evals: Vec<EvalLog>,
    /// Step of the selected checkpoint.
    pub best_step: usize,
}

/// A trained model together with its checkpoint and history.
#[derive(Debug, Clone)]
pub struct TrainOutcome<M> {
    pub model: M,
    pub bundle: CheckpointBundle,
    pub log: TrainLog,
    /// Dev report of the selected model.
    pub dev: MetricReport,
}

impl<M: Seq2Seq> TrainOutcome<M> {
    pub(crate) fn new(model: M, log: TrainLog, dev: MetricReport, tag: StageTag, ctx: &StageContext) -> Self {
        let bundle = save_checkpoint(
            &model,
            CheckpointMeta {
                stage_tag: tag,
                config_hash: ctx.config_hash.clone(),
                metrics: dev.clone(),
            },
        );
        TrainOutcome {
            model,
            bundle,
            log,
            dev,
        }
    }
}

/// Where dev evaluation happens and whether the starting model competes for
/// selection (it does when fine-tuning an already useful checkpoint).
pub(crate) struct Selection<'a> {
    pub role: Role,
    pub dev: &'a Dataset,
    pub include_initial: bool,
}

/// Mini-batch cross-entropy training with per-epoch shuffling, dev
/// evaluation every `eval_every` epochs, best-checkpoint selection on dev
/// Unigram F1 and early stopping.
pub(crate) fn fit<M: Seq2Seq>(
    mut model: M,
    pairs: &[(String, String)],
    cfg: &TrainConfig,
    sel: Selection<'_>,
    tag: StageTag,
    ctx: &StageContext,
) -> Result<TrainOutcome<M>> {
    cfg.validate()?;
    let batches_per_epoch = pairs.len().div_ceil(cfg.batch_size);
    model.configure_optimizer(OptimizerConfig {
        lr: cfg.lr,
        total_steps: Some(batches_per_epoch * cfg.epochs),
    });
    let mut log = TrainLog::default();
    let mut best: Option<(M, MetricReport)> = None;
    if sel.include_initial || cfg.epochs == 0 || pairs.is_empty() {
        let dev = ctx.dev_report(&model, sel.role, sel.dev)?;
        log.evals.push(EvalLog {
            step: 0,
            epoch: 0,
            dev: dev.clone(),
        });
        best = Some((model.clone(), dev));
    }
    if pairs.is_empty() {
        log::warn!("no training pairs; returning the initial model");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut step = 0;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        if pairs.is_empty() {
            break;
        }
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(String, String)> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            let loss = model.train_step(&batch)?;
            step += 1;
            log.steps.push(StepLog { step, loss });
        }
        if epoch % cfg.eval_every != 0 && epoch != cfg.epochs {
            continue;
        }
        let dev = ctx.dev_report(&model, sel.role, sel.dev)?;
        log::info!("{tag:?} epoch {epoch}: dev uni_f1 {:.2}", dev.uni_f1());
        log.evals.push(EvalLog {
            step,
            epoch,
            dev: dev.clone(),
        });
        let improved = best.as_ref().is_none_or(|(_, b)| dev.uni_f1() > b.uni_f1());
        if improved {
            log.best_step = step;
            best = Some((model.clone(), dev));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                log::info!("{tag:?}: early stop after epoch {epoch}");
                break;
            }
        }
    }
    let (model, dev) = best.expect("at least one evaluation ran");
    Ok(TrainOutcome::new(model, log, dev, tag, ctx))
}

/// CE training pairs `(build_model_input(inst, role), gold_query)`.
pub fn supervised_pairs(role: Role, labeled: &Dataset, format: &InputFormat) -> Result<Vec<(String, String)>> {
    labeled.require_labeled()?;
    if role == Role::Ra {
        labeled.require_responses()?;
    }
    labeled
        .instances
        .iter()
        .map(|inst| Ok((build_model_input(inst, role, format)?, inst.gold_or_err()?.to_string())))
        .collect()
}

/// Stage 1: trains `init` as QP or RA on the labeled set and returns the
/// checkpoint with the best dev Unigram F1.
pub fn train_supervised<M: Seq2Seq>(
    init: M,
    role: Role,
    labeled: &Dataset,
    dev: &Dataset,
    cfg: &TrainConfig,
    ctx: &StageContext,
) -> Result<TrainOutcome<M>> {
    dev.require_labeled()?;
    if role == Role::Ra {
        dev.require_responses()?;
    }
    let pairs = supervised_pairs(role, labeled, &ctx.format)?;
    fit(
        init,
        &pairs,
        cfg,
        Selection {
            role,
            dev,
            include_initial: false,
        },
        StageTag::Stage1,
        ctx,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{DialogueInstance, Turn};
    use crate::seq2seq::{ModelDims, TinySeq2Seq, Vocab};

    fn inst(id: &str, hist: &str, resp: Option<&str>, gold: &str) -> DialogueInstance {
        DialogueInstance {
            id: id.into(),
            history: vec![Turn::user(hist)],
            response: resp.map(Turn::system),
            gold_query: Some(gold.into()),
            gold_title: None,
        }
    }

    fn small(words: &[&str]) -> TinySeq2Seq {
        TinySeq2Seq::new(
            Vocab::from_words(words.iter().copied()),
            ModelDims {
                embed: 8,
                hidden: 8,
                ..Default::default()
            },
            3,
        )
    }

    #[test]
    fn memorizes_a_single_instance() {
        let ds = Dataset::new("one", vec![inst("a", "tell me about ireland", None, "ireland")]).unwrap();
        let cfg = TrainConfig {
            epochs: 60,
            batch_size: 1,
            lr: 0.05,
            patience: 60,
            ..Default::default()
        };
        let m = small(&["user:", "tell", "me", "about", "ireland"]);
        let out = train_supervised(m, Role::Qp, &ds, &ds, &cfg, &StageContext::default()).unwrap();
        assert_eq!(out.dev.uni_f1(), 100.0);
        assert_eq!(out.bundle.header.stage_tag, StageTag::Stage1);
    }

    #[test]
    fn ra_needs_responses() {
        let ds = Dataset::new("one", vec![inst("a", "hi", None, "x")]).unwrap();
        let err = train_supervised(small(&["hi", "x"]), Role::Ra, &ds, &ds, &TrainConfig::default(), &StageContext::default());
        assert!(matches!(err, Err(Error::MissingField { .. })));
    }

    #[test]
    fn selected_checkpoint_is_best_seen() {
        let ds = Dataset::new(
            "d",
            vec![
                inst("a", "about ireland", Some("ireland is green"), "ireland"),
                inst("b", "about bowling", Some("bowling is fun"), "bowling"),
            ],
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 1,
            lr: 0.02,
            patience: 8,
            ..Default::default()
        };
        let m = small(&["user:", "system:", "about", "ireland", "bowling", "is", "green", "fun", "<sep>", "response:"]);
        let out = train_supervised(m, Role::Ra, &ds, &ds, &cfg, &StageContext::default()).unwrap();
        let best = out.log.evals.iter().map(|e| e.dev.uni_f1()).fold(f64::MIN, f64::max);
        assert_eq!(out.dev.uni_f1(), best);
        assert!(out.dev.uni_f1() >= out.log.evals.last().unwrap().dev.uni_f1());
    }
}
