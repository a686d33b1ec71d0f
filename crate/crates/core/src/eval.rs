//! Evaluation: corpus metrics for a query producer, Recall@k through a
//! search client, and the candidate-ranking analysis comparing how QP and RA
//! order QP's own beam candidates.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{build_model_input, Dataset, InputFormat, Role};
use crate::error::{Error, Result};
use crate::seq2seq::{DecodeConfig, Seq2Seq};
use crate::stage3::{build_candidate_pool, CandidateQuery};
use crate::textmetrics::{bleu_with, rouge, unigram_f1, RougeVariant, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "uni_f1")]
    UniF1,
    #[serde(rename = "bleu1")]
    Bleu1,
    #[serde(rename = "bleu2")]
    Bleu2,
    #[serde(rename = "rouge1")]
    Rouge1,
    #[serde(rename = "rouge2")]
    Rouge2,
    #[serde(rename = "rougeL")]
    RougeL,
    #[serde(rename = "recall@1")]
    RecallAt1,
    #[serde(rename = "recall@3")]
    RecallAt3,
}

impl Metric {
    pub const TEXT: [Metric; 6] = [
        Metric::UniF1,
        Metric::Bleu1,
        Metric::Bleu2,
        Metric::Rouge1,
        Metric::Rouge2,
        Metric::RougeL,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::UniF1 => "uni_f1",
            Metric::Bleu1 => "bleu1",
            Metric::Bleu2 => "bleu2",
            Metric::Rouge1 => "rouge1",
            Metric::Rouge2 => "rouge2",
            Metric::RougeL => "rougeL",
            Metric::RecallAt1 => "recall@1",
            Metric::RecallAt3 => "recall@3",
        }
    }

    pub fn from_name(name: &str) -> Result<Metric> {
        Metric::TEXT
            .iter()
            .chain(&[Metric::RecallAt1, Metric::RecallAt3])
            .copied()
            .find(|m| m.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown metric `{name}`")))
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Scores are percentages, as in the usual result tables. `per_instance`
/// holds each instance's Unigram F1 on the same scale.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub dataset_name: String,
    pub scores: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_instance: Option<Vec<f64>>,
}

impl MetricReport {
    pub fn new(dataset_name: impl Into<String>) -> Self {
        MetricReport {
            dataset_name: dataset_name.into(),
            ..Default::default()
        }
    }

    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.scores.get(metric.name()).copied()
    }

    pub fn uni_f1(&self) -> f64 {
        self.get(Metric::UniF1).unwrap_or(0.0)
    }
}

#[derive(Clone, Copy)]
pub struct EvalOptions<'a> {
    pub format: &'a InputFormat,
    pub tokenizer: Tokenizer,
    /// Add-one smoothing for BLEU orders >= 2.
    pub bleu_smoothing: bool,
    pub search: Option<&'a dyn SearchClient>,
}

impl<'a> EvalOptions<'a> {
    pub fn new(format: &'a InputFormat) -> Self {
        EvalOptions {
            format,
            tokenizer: Tokenizer::default(),
            bleu_smoothing: false,
            search: None,
        }
    }
}

pub fn predict_greedy<M: Seq2Seq>(model: &M, role: Role, dataset: &Dataset, format: &InputFormat) -> Result<Vec<String>> {
    dataset
        .instances
        .iter()
        .map(|inst| Ok(model.greedy(&build_model_input(inst, role, format)?)?.text))
        .collect()
}

/// Greedy-decodes every instance and scores the requested metrics against
/// the gold queries.
pub fn evaluate<M: Seq2Seq>(
    model: &M,
    role: Role,
    dataset: &Dataset,
    metrics: &[Metric],
    opts: &EvalOptions<'_>,
) -> Result<MetricReport> {
    dataset.require_labeled()?;
    let preds = predict_greedy(model, role, dataset, opts.format)?;
    let golds: Vec<&str> = dataset
        .instances
        .iter()
        .map(|i| i.gold_or_err())
        .collect::<Result<_>>()?;
    let mut report = score_predictions(&dataset.name, &preds, &golds, metrics, opts)?;
    for m in metrics {
        let k = match m {
            Metric::RecallAt1 => 1,
            Metric::RecallAt3 => 3,
            _ => continue,
        };
        let client = opts
            .search
            .ok_or_else(|| Error::Config(format!("{m} needs a search client")))?;
        report
            .scores
            .insert(m.name().to_string(), 100.0 * recall_at_k(model, dataset, client, k, opts.format)?);
    }
    Ok(report)
}

/// Text metrics for already-decoded predictions (recall metrics are skipped).
pub fn score_predictions(
    name: &str,
    preds: &[String],
    golds: &[&str],
    metrics: &[Metric],
    opts: &EvalOptions<'_>,
) -> Result<MetricReport> {
    if preds.len() != golds.len() {
        return Err(Error::Argument("predictions and references differ in length".into()));
    }
    let tok = opts.tokenizer;
    let per_instance: Vec<f64> = preds
        .iter()
        .zip(golds)
        .map(|(p, g)| 100.0 * unigram_f1(p, g, tok))
        .collect();
    let n = preds.len().max(1) as f64;
    let pred_refs: Vec<&str> = preds.iter().map(String::as_str).collect();
    let mut report = MetricReport::new(name);
    for &m in metrics {
        let value = match m {
            Metric::UniF1 => per_instance.iter().sum::<f64>() / n,
            Metric::Bleu1 => bleu_with(&pred_refs, golds, 1, tok, opts.bleu_smoothing)?,
            Metric::Bleu2 => bleu_with(&pred_refs, golds, 2, tok, opts.bleu_smoothing)?,
            Metric::Rouge1 | Metric::Rouge2 | Metric::RougeL => {
                let variant = match m {
                    Metric::Rouge1 => RougeVariant::R1,
                    Metric::Rouge2 => RougeVariant::R2,
                    _ => RougeVariant::RL,
                };
                100.0 * preds.iter().zip(golds).map(|(p, g)| rouge(p, g, variant, tok).f1).sum::<f64>() / n
            }
            Metric::RecallAt1 | Metric::RecallAt3 => continue,
        };
        report.scores.insert(m.name().to_string(), value);
    }
    report.per_instance = Some(per_instance);
    Ok(report)
}

/// A search engine returning document titles, best first.
pub trait SearchClient: Send + Sync {
    fn search(&self, query: &str, k: usize) -> Result<Vec<String>>;
    fn is_indexed(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub title: String,
    pub body: String,
}

pub fn load_documents(path: impl AsRef<Path>) -> Result<Vec<Document>> {
    let path = path.as_ref();
    let mut docs = vec![];
    for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        docs.push(serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(docs)
}

/// In-memory inverted index scored with `(1 + ln tf) * idf`,
/// `idf = ln((N + 1) / (df + 1)) + 1`. Titles are indexed with bodies.
#[derive(Debug, Clone, Default)]
pub struct TfIdfIndex {
    titles: Vec<String>,
    postings: BTreeMap<String, Vec<(usize, u32)>>,
    indexed: bool,
}

impl TfIdfIndex {
    /// An index with no documents that refuses queries until [`Self::index`] runs.
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_documents(docs: &[Document]) -> Self {
        let mut idx = Self::new();
        idx.index(docs);
        idx
    }

    pub fn index(&mut self, docs: &[Document]) {
        for doc in docs {
            let id = self.titles.len();
            self.titles.push(doc.title.clone());
            let mut tf: BTreeMap<String, u32> = BTreeMap::new();
            for w in Tokenizer::WhitespaceLower.tokenize(&format!("{} {}", doc.title, doc.body)) {
                *tf.entry(w).or_insert(0) += 1;
            }
            for (w, c) in tf {
                self.postings.entry(w).or_default().push((id, c));
            }
        }
        self.indexed = true;
    }

    pub fn len(&self) -> usize {
        self.titles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.titles.is_empty()
    }
}

impl SearchClient for TfIdfIndex {
    fn search(&self, query: &str, k: usize) -> Result<Vec<String>> {
        if !self.indexed {
            return Err(Error::Config("search client has not been indexed".into()));
        }
        let n = self.titles.len() as f64;
        let mut scores: BTreeMap<usize, f64> = BTreeMap::new();
        let mut terms = Tokenizer::WhitespaceLower.tokenize(query);
        terms.sort();
        terms.dedup();
        for t in &terms {
            if let Some(post) = self.postings.get(t) {
                let idf = ((n + 1.0) / (post.len() as f64 + 1.0)).ln() + 1.0;
                for &(doc, tf) in post {
                    *scores.entry(doc).or_insert(0.0) += (1.0 + (tf as f64).ln()) * idf;
                }
            }
        }
        let mut ranked: Vec<(usize, f64)> = scores.into_iter().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        Ok(ranked.into_iter().take(k).map(|(d, _)| self.titles[d].clone()).collect())
    }

    fn is_indexed(&self) -> bool {
        self.indexed
    }
}

/// Fraction of instances whose `gold_title` is the top result of at least
/// one of the model's top-`k` beam queries.
pub fn recall_at_k<M: Seq2Seq>(
    model: &M,
    dataset: &Dataset,
    client: &dyn SearchClient,
    k: usize,
    format: &InputFormat,
) -> Result<f64> {
    if !client.is_indexed() {
        return Err(Error::Config("recall@k: search client has not been indexed".into()));
    }
    if k == 0 {
        return Err(Error::Argument("recall@k: k must be positive".into()));
    }
    if dataset.is_empty() {
        return Ok(0.0);
    }
    // A fixed beam keeps the top-1 query identical across k, so recall is monotone in k.
    let cfg = DecodeConfig::beam(DecodeConfig::DEFAULT_BEAM.max(k), k);
    let mut hits = 0usize;
    for inst in &dataset.instances {
        let gold = inst.gold_title.as_deref().ok_or_else(|| Error::MissingField {
            id: inst.id.clone(),
            field: "gold_title",
        })?;
        let queries = model.generate(&build_model_input(inst, Role::Qp, format)?, &cfg)?;
        let mut hit = false;
        for q in queries.iter().take(k) {
            if client.search(&q.text, 1)?.iter().any(|t| t == gold) {
                hit = true;
                break;
            }
        }
        hits += hit as usize;
    }
    Ok(hits as f64 / dataset.len() as f64)
}

/// Product-moment correlation coefficient.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Argument(format!(
            "pearson: need two equal-length vectors of length >= 2 (got {} and {})",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("constant input vector".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub pearson_qp: f64,
    pub pearson_ra: f64,
    /// Uni. F1 (percent) of the top-ranked candidate under each ranking.
    pub top1_f1_qp: f64,
    pub top1_f1_ra: f64,
    pub top1_f1_gold: f64,
    pub instances: usize,
    pub skipped: usize,
}

/// Position of each candidate (0 = best) when sorted by `key`.
fn positions(pool: &[CandidateQuery], mut cmp: impl FnMut(&CandidateQuery, &CandidateQuery) -> std::cmp::Ordering) -> Vec<f64> {
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| cmp(&pool[a], &pool[b]).then(a.cmp(&b)));
    let mut pos = vec![0.0; pool.len()];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p as f64;
    }
    pos
}

/// How candidates with equal Unigram F1 are ordered in the gold ranking.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GoldTies {
    /// Break ties by `f_qp` descending.
    #[default]
    ByQp,
    /// Tied candidates share the mean of their positions. Pools whose
    /// candidates all tie have no gold ranking and are skipped.
    MidRank,
}

/// Per-instance rank vectors for one candidate pool, plus each candidate's
/// Unigram F1 to the gold query: (QP, RA, gold, f1).
pub fn pool_rankings(
    pool: &[CandidateQuery],
    gold: &str,
    tok: Tokenizer,
    ties: GoldTies,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let f1: Vec<f64> = pool.iter().map(|c| unigram_f1(&c.text, gold, tok)).collect();
    let qp = positions(pool, |a, b| b.f_qp.total_cmp(&a.f_qp));
    let ra: Vec<f64> = pool.iter().map(|c| c.rank as f64).collect();
    let idx: BTreeMap<*const CandidateQuery, usize> =
        pool.iter().enumerate().map(|(i, c)| (c as *const _, i)).collect();
    let gold_rank = match ties {
        GoldTies::ByQp => positions(pool, |a, b| {
            let (fa, fb) = (f1[idx[&(a as *const _)]], f1[idx[&(b as *const _)]]);
            fb.total_cmp(&fa).then(b.f_qp.total_cmp(&a.f_qp))
        }),
        GoldTies::MidRank => f1
            .iter()
            .map(|&x| {
                let above = f1.iter().filter(|&&y| y > x).count();
                let tied = f1.iter().filter(|&&y| y == x).count();
                above as f64 + (tied - 1) as f64 / 2.0
            })
            .collect(),
    };
    (qp, ra, gold_rank, f1)
}

/// Compares QP's ranking (by `f_qp`) and RA's ranking (by `f_ra`) of QP's
/// candidate pools against the gold ranking (Unigram F1 to the gold query,
/// ties by `f_qp`). Pearson is computed per instance on rank vectors and
/// averaged; pools smaller than two are skipped.
pub fn ranking_analysis<M: Seq2Seq>(
    qp: &M,
    ra: &M,
    labeled: &Dataset,
    n_c: usize,
    format: &InputFormat,
    tok: Tokenizer,
) -> Result<RankingReport> {
    ranking_analysis_with(qp, ra, labeled, n_c, format, tok, GoldTies::ByQp)
}

/// [`ranking_analysis`] with a choice of gold tie handling.
pub fn ranking_analysis_with<M: Seq2Seq>(
    qp: &M,
    ra: &M,
    labeled: &Dataset,
    n_c: usize,
    format: &InputFormat,
    tok: Tokenizer,
    ties: GoldTies,
) -> Result<RankingReport> {
    labeled.require_labeled()?;
    labeled.require_responses()?;
    let (mut pq, mut pr, mut tq, mut tr, mut tg) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut used, mut skipped) = (0usize, 0usize);
    for inst in &labeled.instances {
        let pool = build_candidate_pool(qp, ra, inst, n_c, format)?;
        if pool.len() < 2 {
            skipped += 1;
            continue;
        }
        let gold = inst.gold_or_err()?;
        let (qp_rank, ra_rank, gold_rank, f1) = pool_rankings(&pool, gold, tok, ties);
        if gold_rank.iter().all(|&r| r == gold_rank[0]) {
            skipped += 1;
            continue;
        }
        pq += pearson(&qp_rank, &gold_rank)?;
        pr += pearson(&ra_rank, &gold_rank)?;
        let top = |r: &[f64]| f1[r.iter().position(|&p| p == 0.0).expect("rank 0 exists")];
        tq += top(&qp_rank);
        tr += top(&ra_rank);
        tg += f1.iter().copied().fold(0.0, f64::max);
        used += 1;
    }
    let n = used.max(1) as f64;
    Ok(RankingReport {
        pearson_qp: pq / n,
        pearson_ra: pr / n,
        top1_f1_qp: 100.0 * tq / n,
        top1_f1_ra: 100.0 * tr / n,
        top1_f1_gold: 100.0 * tg / n,
        instances: used,
        skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn pearson_fixtures() {
        assert_abs_diff_eq!(pearson(&[1., 2., 3.], &[2., 4., 6.]).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(pearson(&[1., 2., 3.], &[1., 3., 2.]).unwrap(), 0.5);
        assert_abs_diff_eq!(pearson(&[1., 2., 3.], &[3., 2., 1.]).unwrap(), -1.0, epsilon = 1e-12);
        assert!(matches!(pearson(&[1., 1., 1.], &[1., 2., 3.]), Err(Error::UndefinedCorrelation(_))));
        assert!(pearson(&[1.], &[1.]).is_err());
    }

    fn docs() -> Vec<Document> {
        vec![
            Document {
                title: "Ireland".into(),
                body: "ireland is an island in the north atlantic".into(),
            },
            Document {
                title: "Bowling".into(),
                body: "bowling is a target sport".into(),
            },
            Document {
                title: "Javelin throw".into(),
                body: "javelin throw is a track and field event".into(),
            },
        ]
    }

    #[test]
    fn unique_keyword_retrieves_at_rank_one() {
        let idx = TfIdfIndex::from_documents(&docs());
        assert_eq!(idx.search("ireland", 3).unwrap()[0], "Ireland");
        assert_eq!(idx.search("javelin", 1).unwrap(), vec!["Javelin throw"]);
        assert!(idx.search("zzz", 3).unwrap().is_empty());
        assert!(idx.search("is", 2).unwrap().len() <= 2);
    }

    #[test]
    fn unindexed_client_refuses() {
        let idx = TfIdfIndex::new();
        assert!(matches!(idx.search("x", 1), Err(Error::Config(_))));
        let empty = TfIdfIndex::from_documents(&[]);
        assert!(empty.search("x", 1).unwrap().is_empty());
    }

    #[test]
    fn score_predictions_matches_per_instance_mean() {
        let fmt = InputFormat::default();
        let opts = EvalOptions::new(&fmt);
        let preds = vec!["ireland".to_string(), "ireland weather".into(), "x".into()];
        let golds = ["ireland", "ireland", "y"];
        let r = score_predictions("d", &preds, &golds, &Metric::TEXT, &opts).unwrap();
        let per = r.per_instance.as_ref().unwrap();
        assert_abs_diff_eq!(r.uni_f1(), per.iter().sum::<f64>() / 3.0, epsilon = 1e-9);
        assert_abs_diff_eq!(r.uni_f1(), (100.0 + 200.0 / 3.0) / 3.0, epsilon = 1e-9);
        assert_eq!(r.scores.len(), Metric::TEXT.len());
    }

    fn cand(text: &str, f_qp: f64, f_ra: f64, rank: usize) -> CandidateQuery {
        CandidateQuery {
            text: text.into(),
            f_qp,
            f_ra,
            rank,
            reward: 0.0,
        }
    }

    #[test]
    fn gold_ranking_ties_follow_qp() {
        let pool = vec![
            cand("north atlantic", -0.1, -0.9, 2),
            cand("europe", -0.2, -0.5, 1),
            cand("ireland", -0.3, -0.1, 0),
        ];
        let (qp, ra, gold, f1) = pool_rankings(&pool, "ireland", Tokenizer::WhitespaceLower, GoldTies::ByQp);
        assert_eq!(qp, vec![0., 1., 2.]);
        assert_eq!(ra, vec![2., 1., 0.]);
        assert_eq!(gold, vec![1., 2., 0.]);
        assert_eq!(f1, vec![0., 0., 1.]);
        let (_, _, mid, _) = pool_rankings(&pool, "ireland", Tokenizer::WhitespaceLower, GoldTies::MidRank);
        assert_eq!(mid, vec![1.5, 1.5, 0.]);
    }
}
