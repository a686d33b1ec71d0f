//! Comparison systems: self-training on QP's own pseudo labels and
//! sequence-level distillation from RA.

use serde::{Deserialize, Serialize};

use crate::corpus::{build_model_input, Dataset, Role};
use crate::error::Result;
use crate::seq2seq::{Seq2Seq, StageTag};
use crate::stage1::{fit, supervised_pairs, Selection, StageContext, TrainConfig, TrainOutcome};
use crate::stage2::{generate_pseudo_query, train_on_pseudo, Strategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelfTrainVariant {
    /// Fresh parameters trained on QP-labeled pseudo instances.
    Scratch,
    /// The Stage-1 QP tuned on its own pseudo labels.
    Qp,
    /// The Stage-1 QP tuned on pseudo labels plus the labeled set.
    Joint,
}

impl SelfTrainVariant {
    pub const ALL: [SelfTrainVariant; 3] = [SelfTrainVariant::Scratch, SelfTrainVariant::Qp, SelfTrainVariant::Joint];
}

/// QP's greedy query for every unlabeled instance, as history-input pairs.
/// Empty decodes are dropped.
pub fn qp_pseudo_pairs<M: Seq2Seq>(qp: &M, unlabeled: &Dataset, ctx: &StageContext) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::with_capacity(unlabeled.len());
    for inst in &unlabeled.instances {
        let input = build_model_input(inst, Role::Qp, &ctx.format)?;
        let q = qp.greedy(&input)?.text;
        if !q.trim().is_empty() {
            pairs.push((input, q));
        }
    }
    Ok(pairs)
}

/// Training pairs of a self-training variant: pseudo pairs, followed by the
/// labeled pairs for JOINT.
pub fn self_train_pairs<M: Seq2Seq>(
    variant: SelfTrainVariant,
    qp: &M,
    labeled: &Dataset,
    unlabeled: &Dataset,
    ctx: &StageContext,
) -> Result<Vec<(String, String)>> {
    let mut pairs = qp_pseudo_pairs(qp, unlabeled, ctx)?;
    if variant == SelfTrainVariant::Joint {
        pairs.extend(supervised_pairs(Role::Qp, labeled, &ctx.format)?);
    }
    Ok(pairs)
}

pub fn self_train<M: Seq2Seq>(
    variant: SelfTrainVariant,
    qp: &M,
    labeled: &Dataset,
    unlabeled: &Dataset,
    dev: &Dataset,
    cfg: &TrainConfig,
    ctx: &StageContext,
) -> Result<TrainOutcome<M>> {
    let pairs = self_train_pairs(variant, qp, labeled, unlabeled, ctx)?;
    let (init, include_initial) = match variant {
        SelfTrainVariant::Scratch => (qp.reinitialized(cfg.seed), false),
        SelfTrainVariant::Qp | SelfTrainVariant::Joint => (qp.clone(), true),
    };
    fit(
        init,
        &pairs,
        cfg,
        Selection {
            role: Role::Qp,
            dev,
            include_initial,
        },
        StageTag::Baseline,
        ctx,
    )
}

/// RA's greedy outputs on every unlabeled instance, with no selection,
/// become QP's CE targets. The pairs, their order and the trainer are those
/// of Stage 2 at `alpha = 0`.
pub fn distill_kd<M: Seq2Seq>(
    ra: &M,
    qp_init: &M,
    unlabeled: &Dataset,
    dev: &Dataset,
    strategy: Strategy,
    cfg: &TrainConfig,
    ctx: &StageContext,
) -> Result<TrainOutcome<M>> {
    unlabeled.require_responses()?;
    let pairs = kd_pairs(ra, unlabeled, ctx)?;
    train_on_pseudo(qp_init, Role::Qp, &pairs, strategy, cfg, dev, StageTag::Baseline, ctx)
}

pub fn kd_pairs<M: Seq2Seq>(ra: &M, unlabeled: &Dataset, ctx: &StageContext) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::with_capacity(unlabeled.len());
    for inst in &unlabeled.instances {
        if let Some(q) = generate_pseudo_query(ra, inst, ctx)? {
            pairs.push((build_model_input(inst, Role::Qp, &ctx.format)?, q));
        }
    }
    Ok(pairs)
}
