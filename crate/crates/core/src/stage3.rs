//! Stage 3: REINFORCE fine-tuning of QP with RA as the reward model.
//!
//! For each unlabeled instance QP beam-decodes a pool of candidate queries,
//! RA scores every candidate on the response-augmented input, and one
//! candidate sampled from the softmax over QP's own scores is reinforced
//! with its (mean-centered) reward.

use std::cmp::Ordering;

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{build_model_input, Dataset, DialogueInstance, InputFormat, Role};
use crate::error::{Error, Result};
use crate::eval::MetricReport;
use crate::seq2seq::{DecodeConfig, OptimizerConfig, Seq2Seq, StageTag};
use crate::stage1::{EvalLog, StageContext, StepLog, TrainLog, TrainOutcome};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateQuery {
    pub text: String,
    /// QP's length-normalized log-probability.
    pub f_qp: f64,
    /// RA's length-normalized log-probability on the response-augmented input.
    pub f_ra: f64,
    /// 0-based position under `f_ra` descending.
    pub rank: usize,
    pub reward: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Prob,
    Rank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RLConfig {
    pub n_candidates: usize,
    pub reward_kind: RewardKind,
    pub lr: f64,
    /// Total policy-gradient updates; the corpus is cycled as needed.
    pub steps: usize,
    pub seed: u64,
    /// Dev evaluation period, in updates.
    pub eval_every: usize,
}

impl Default for RLConfig {
    fn default() -> Self {
        RLConfig {
            n_candidates: 3,
            reward_kind: RewardKind::Rank,
            lr: 3e-5,
            steps: 1000,
            seed: 0,
            eval_every: 250,
        }
    }
}

impl RLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_candidates < 2 {
            return Err(Error::Config("rl: n_candidates must be at least 2".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("rl: eval_every must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("rl: invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

/// Sorts candidates into rank order: `f_ra` descending, then `f_qp`
/// descending, then text.
fn rank_order(a: &CandidateQuery, b: &CandidateQuery) -> Ordering {
    b.f_ra
        .total_cmp(&a.f_ra)
        .then(b.f_qp.total_cmp(&a.f_qp))
        .then_with(|| a.text.cmp(&b.text))
}

/// Sets `rank` on every candidate without reordering the pool.
pub fn assign_ranks(pool: &mut [CandidateQuery]) {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| rank_order(&pool[a], &pool[b]));
    for (r, i) in order.into_iter().enumerate() {
        pool[i].rank = r;
    }
}

/// Candidate pool for one instance, in QP beam order.
pub fn build_candidate_pool<M: Seq2Seq>(
    qp: &M,
    ra: &M,
    inst: &DialogueInstance,
    n_c: usize,
    format: &InputFormat,
) -> Result<Vec<CandidateQuery>> {
    if n_c < 2 {
        return Err(Error::Argument("candidate pool needs n_c >= 2".into()));
    }
    let qp_input = build_model_input(inst, Role::Qp, format)?;
    let ra_input = build_model_input(inst, Role::Ra, format)?;
    let beams: Vec<_> = qp
        .generate(&qp_input, &DecodeConfig::beam(n_c, n_c))?
        .into_iter()
        .filter(|q| !q.text.trim().is_empty())
        .collect();
    if beams.len() < n_c {
        log::warn!("instance {}: only {} of {n_c} distinct candidates", inst.id, beams.len());
    }
    let texts: Vec<&str> = beams.iter().map(|q| q.text.as_str()).collect();
    let f_ra = if texts.is_empty() { vec![] } else { ra.score_many(&ra_input, &texts)? };
    let mut pool: Vec<CandidateQuery> = beams
        .iter()
        .zip(f_ra)
        .map(|(q, f_ra)| CandidateQuery {
            text: q.text.clone(),
            f_qp: q.norm_logprob,
            f_ra,
            rank: 0,
            reward: 0.0,
        })
        .collect();
    assign_ranks(&mut pool);
    Ok(pool)
}

/// Softmax over `f_qp`.
pub fn policy_distribution(pool: &[CandidateQuery]) -> Vec<f64> {
    let max = pool.iter().map(|c| c.f_qp).fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = pool.iter().map(|c| (c.f_qp - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

/// Uncentered rewards: `f_ra` (PROB) or `1 / (1 + rank)` (RANK).
pub fn raw_rewards(pool: &[CandidateQuery], kind: RewardKind) -> Vec<f64> {
    pool.iter()
        .map(|c| match kind {
            RewardKind::Prob => c.f_ra,
            RewardKind::Rank => 1.0 / (1.0 + c.rank as f64),
        })
        .collect()
}

/// Sets `reward` on every candidate to its raw reward, mean-centered across
/// the pool.
pub fn compute_rewards(pool: &mut [CandidateQuery], kind: RewardKind) {
    if pool.is_empty() {
        return;
    }
    let raw = raw_rewards(pool, kind);
    // Averaging offsets from the first reward keeps a constant pool exactly
    // at zero, which a plain sum / n does not guarantee.
    let base = raw[0];
    let mean = base + raw.iter().map(|r| r - base).sum::<f64>() / raw.len() as f64;
    for (c, r) in pool.iter_mut().zip(raw) {
        c.reward = r - mean;
    }
}

/// One policy-gradient update on `-reward * log p(candidate | history)`.
pub fn reinforce_step<M: Seq2Seq>(
    qp: &mut M,
    inst: &DialogueInstance,
    sampled: &CandidateQuery,
    format: &InputFormat,
) -> Result<f64> {
    qp.reinforce_step(&build_model_input(inst, Role::Qp, format)?, &sampled.text, sampled.reward)
}

/// One line of the RL log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RlRecord {
    pub step: usize,
    pub instance_id: String,
    pub candidates: Vec<String>,
    pub f_qp: Vec<f64>,
    pub f_ra: Vec<f64>,
    pub ranks: Vec<usize>,
    pub rewards: Vec<f64>,
    pub sampled: usize,
}

#[derive(Debug, Clone)]
pub struct Stage3Output<M> {
    pub outcome: TrainOutcome<M>,
    pub rl_log: Vec<RlRecord>,
}

/// Stage 3 over the unlabeled corpus. The returned QP is the best on dev
/// Unigram F1 among the evaluated snapshots, the starting model included.
pub fn train_stage3<M: Seq2Seq>(
    qp: &M,
    ra: &M,
    unlabeled: &Dataset,
    dev: &Dataset,
    cfg: &RLConfig,
    ctx: &StageContext,
) -> Result<Stage3Output<M>> {
    cfg.validate()?;
    unlabeled.require_responses()?;
    let mut model = qp.clone();
    model.configure_optimizer(OptimizerConfig {
        lr: cfg.lr,
        total_steps: Some(cfg.steps),
    });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = TrainLog::default();
    let mut rl_log = vec![];

    let initial = ctx.dev_report(&model, Role::Qp, dev)?;
    log.evals.push(EvalLog {
        step: 0,
        epoch: 0,
        dev: initial.clone(),
    });
    let mut best: (M, MetricReport) = (model.clone(), initial);

    if unlabeled.is_empty() && cfg.steps > 0 {
        log::warn!("stage 3: empty corpus; returning the starting model");
    }
    let n = unlabeled.len();
    for step in 1..=if n == 0 { 0 } else { cfg.steps } {
        let inst = &unlabeled.instances[(step - 1) % n];
        let mut pool = build_candidate_pool(&model, ra, inst, cfg.n_candidates, &ctx.format)?;
        let mut loss = 0.0;
        if !pool.is_empty() {
            compute_rewards(&mut pool, cfg.reward_kind);
            let probs = policy_distribution(&pool);
            let pick = WeightedIndex::new(&probs)
                .map_err(|e| Error::Argument(format!("policy distribution: {e}")))?
                .sample(&mut rng);
            loss = reinforce_step(&mut model, inst, &pool[pick], &ctx.format)?;
            rl_log.push(RlRecord {
                step,
                instance_id: inst.id.clone(),
                candidates: pool.iter().map(|c| c.text.clone()).collect(),
                f_qp: pool.iter().map(|c| c.f_qp).collect(),
                f_ra: pool.iter().map(|c| c.f_ra).collect(),
                ranks: pool.iter().map(|c| c.rank).collect(),
                rewards: pool.iter().map(|c| c.reward).collect(),
                sampled: pick,
            });
        }
        log.steps.push(StepLog { step, loss });
        if step % cfg.eval_every == 0 || step == cfg.steps {
            let report = ctx.dev_report(&model, Role::Qp, dev)?;
            log::info!("stage 3 step {step}: dev uni_f1 {:.2}", report.uni_f1());
            log.evals.push(EvalLog {
                step,
                epoch: 0,
                dev: report.clone(),
            });
            if report.uni_f1() > best.1.uni_f1() {
                log.best_step = step;
                best = (model.clone(), report);
            }
        }
    }
    let (model, dev_report) = best;
    Ok(Stage3Output {
        outcome: TrainOutcome::new(model, log, dev_report, StageTag::Stage3, ctx),
        rl_log,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cand(text: &str, f_qp: f64, f_ra: f64) -> CandidateQuery {
        CandidateQuery {
            text: text.into(),
            f_qp,
            f_ra,
            rank: 0,
            reward: 0.0,
        }
    }

    #[test]
    fn ranks_follow_ra_then_qp_then_text() {
        let mut pool = vec![cand("a", -1.0, -0.1), cand("b", -1.0, -0.5), cand("c", -1.0, -0.2)];
        assign_ranks(&mut pool);
        assert_eq!(pool.iter().map(|c| c.rank).collect::<Vec<_>>(), vec![0, 2, 1]);

        let mut tie = vec![cand("x", -0.9, -0.3), cand("y", -0.2, -0.3)];
        assign_ranks(&mut tie);
        assert_eq!((tie[0].rank, tie[1].rank), (1, 0));

        let mut full_tie = vec![cand("z", -0.2, -0.3), cand("y", -0.2, -0.3)];
        assign_ranks(&mut full_tie);
        assert_eq!((full_tie[0].rank, full_tie[1].rank), (1, 0));
    }

    #[test]
    fn policy_examples() {
        let p = policy_distribution(&[cand("a", -0.4, 0.0), cand("b", -0.4, 0.0)]);
        assert_eq!(p, vec![0.5, 0.5]);
        let p = policy_distribution(&[cand("a", 0.0, 0.0), cand("b", -(3f64.ln()), 0.0)]);
        assert_abs_diff_eq!(p[0], 0.75, epsilon = 1e-9);
        assert_abs_diff_eq!(p[1], 0.25, epsilon = 1e-9);
    }

    #[test]
    fn rank_rewards_for_three() {
        let mut pool = vec![cand("a", 0.0, -0.1), cand("b", 0.0, -0.2), cand("c", 0.0, -0.3)];
        assign_ranks(&mut pool);
        compute_rewards(&mut pool, RewardKind::Rank);
        let expect = [1.0 - 11.0 / 18.0, 0.5 - 11.0 / 18.0, 1.0 / 3.0 - 11.0 / 18.0];
        for (c, e) in pool.iter().zip(expect) {
            assert_abs_diff_eq!(c.reward, e, epsilon = 1e-12);
        }
        assert_abs_diff_eq!(pool[0].reward, 0.3889, epsilon = 1e-4);
    }

    #[test]
    fn prob_rewards_center_f_ra() {
        let mut pool = vec![cand("a", 0.0, -0.5), cand("b", 0.0, -0.5)];
        compute_rewards(&mut pool, RewardKind::Prob);
        assert!(pool.iter().all(|c| c.reward == 0.0));
        let mut pool = vec![cand("a", 0.0, -0.2), cand("b", 0.0, -0.6)];
        compute_rewards(&mut pool, RewardKind::Prob);
        assert_abs_diff_eq!(pool[0].reward, 0.2, epsilon = 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn pool() -> impl Strategy<Value = Vec<CandidateQuery>> {
            prop::collection::vec((-5.0f64..0.0, -5.0f64..0.0), 1..12).prop_map(|v| {
                v.into_iter()
                    .enumerate()
                    .map(|(i, (q, r))| cand(&format!("q{i}"), q, r))
                    .collect()
            })
        }

        proptest! {
            #[test]
            fn softmax_sums_to_one_and_ignores_shifts(p in pool(), c in -50.0f64..50.0) {
                let a = policy_distribution(&p);
                prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                let shifted: Vec<_> = p.iter().map(|x| CandidateQuery { f_qp: x.f_qp + c, ..x.clone() }).collect();
                for (x, y) in a.iter().zip(policy_distribution(&shifted)) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }

            #[test]
            fn constant_prob_rewards_are_exactly_zero(p in pool(), f in -5.0f64..0.0) {
                let mut flat: Vec<_> = p.into_iter().map(|c| CandidateQuery { f_ra: f, ..c }).collect();
                compute_rewards(&mut flat, RewardKind::Prob);
                prop_assert!(flat.iter().all(|c| c.reward == 0.0));
            }

            #[test]
            fn rewards_only_touch_reward(mut p in pool(), rank in any::<bool>()) {
                assign_ranks(&mut p);
                let before = p.clone();
                let kind = if rank { RewardKind::Rank } else { RewardKind::Prob };
                compute_rewards(&mut p, kind);
                prop_assert!(p.iter().map(|c| c.reward).sum::<f64>().abs() < 1e-9);
                for (a, b) in p.iter().zip(&before) {
                    prop_assert_eq!(&a.text, &b.text);
                    prop_assert_eq!(a.f_qp, b.f_qp);
                    prop_assert_eq!(a.f_ra, b.f_ra);
                    prop_assert_eq!(a.rank, b.rank);
                }
                if rank {
                    let mut by_rank = p.clone();
                    by_rank.sort_by_key(|c| c.rank);
                    for w in by_rank.windows(2) {
                        prop_assert!(w[0].reward > w[1].reward);
                    }
                }
            }
        }
    }
}
