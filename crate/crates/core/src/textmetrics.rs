//! Text-generation metrics (Unigram F1, corpus BLEU, ROUGE-1/2/L) and the
//! similarity function used to score pseudo queries.
//!
//! Counting is clipped everywhere: an n-gram occurring twice in the
//! prediction and once in the reference contributes one match. Two empty
//! token sequences are a perfect match; exactly one empty side scores zero.

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, OnceLock, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenizer {
    /// Lowercase, then split on whitespace.
    #[default]
    WhitespaceLower,
    /// One token per non-whitespace code point (CJK text).
    Char,
}

impl Tokenizer {
    pub fn tokenize(self, text: &str) -> Vec<String> {
        match self {
            Tokenizer::WhitespaceLower => text.split_whitespace().map(str::to_lowercase).collect(),
            Tokenizer::Char => text
                .chars()
                .filter(|c| !c.is_whitespace())
                .map(|c| c.to_string())
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    const ZERO: Prf = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    const ONE: Prf = Prf {
        precision: 1.0,
        recall: 1.0,
        f1: 1.0,
    };

    fn from_counts(matched: usize, pred_total: usize, ref_total: usize) -> Prf {
        if matched == 0 {
            return Prf::ZERO;
        }
        let precision = matched as f64 / pred_total as f64;
        let recall = matched as f64 / ref_total as f64;
        Prf {
            precision,
            recall,
            f1: 2.0 * precision * recall / (precision + recall),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap(pred: &HashMap<&[String], usize>, reference: &HashMap<&[String], usize>) -> usize {
    pred.iter()
        .map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0)))
        .sum()
}

fn ngram_prf(pred: &[String], reference: &[String], n: usize) -> Prf {
    let pc = ngram_counts(pred, n);
    let rc = ngram_counts(reference, n);
    let pred_total = pred.len().saturating_sub(n - 1);
    let ref_total = reference.len().saturating_sub(n - 1);
    if pred_total == 0 && ref_total == 0 {
        // Nothing to compare at this order; fall back to sequence identity.
        return if pred == reference { Prf::ONE } else { Prf::ZERO };
    }
    if pred_total == 0 || ref_total == 0 {
        return Prf::ZERO;
    }
    Prf::from_counts(clipped_overlap(&pc, &rc), pred_total, ref_total)
}

pub fn unigram_f1(pred: &str, reference: &str, tok: Tokenizer) -> f64 {
    unigram_f1_tokens(&tok.tokenize(pred), &tok.tokenize(reference))
}

pub(crate) fn unigram_f1_tokens(pred: &[String], reference: &[String]) -> f64 {
    ngram_prf(pred, reference, 1).f1
}

/// Corpus-level BLEU in `[0, 100]` without smoothing.
pub fn bleu(preds: &[&str], refs: &[&str], max_n: usize, tok: Tokenizer) -> Result<f64> {
    bleu_with(preds, refs, max_n, tok, false)
}

/// Corpus-level BLEU. With `smooth`, orders n >= 2 add one to both the
/// matched and total n-gram counts.
pub fn bleu_with(preds: &[&str], refs: &[&str], max_n: usize, tok: Tokenizer, smooth: bool) -> Result<f64> {
    if preds.len() != refs.len() {
        return Err(Error::Argument(format!(
            "bleu: {} predictions vs {} references",
            preds.len(),
            refs.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Argument("bleu: empty corpus".into()));
    }
    if max_n == 0 {
        return Err(Error::Argument("bleu: max_n must be at least 1".into()));
    }
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut pred_len, mut ref_len) = (0usize, 0usize);
    for (p, r) in preds.iter().zip(refs) {
        let pt = tok.tokenize(p);
        let rt = tok.tokenize(r);
        pred_len += pt.len();
        ref_len += rt.len();
        for n in 1..=max_n {
            let pc = ngram_counts(&pt, n);
            let rc = ngram_counts(&rt, n);
            matched[n - 1] += clipped_overlap(&pc, &rc);
            total[n - 1] += pt.len().saturating_sub(n - 1);
        }
    }
    if pred_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 1..=max_n {
        let (mut m, mut t) = (matched[n - 1] as f64, total[n - 1] as f64);
        if smooth && n >= 2 {
            m += 1.0;
            t += 1.0;
        }
        if m == 0.0 || t == 0.0 {
            return Ok(0.0);
        }
        log_sum += (m / t).ln();
    }
    let bp = (1.0 - ref_len as f64 / pred_len as f64).min(0.0).exp();
    Ok(100.0 * bp * (log_sum / max_n as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RougeVariant {
    R1,
    R2,
    RL,
}

pub fn rouge(pred: &str, reference: &str, variant: RougeVariant, tok: Tokenizer) -> Prf {
    let p = tok.tokenize(pred);
    let r = tok.tokenize(reference);
    match variant {
        RougeVariant::R1 => ngram_prf(&p, &r, 1),
        RougeVariant::R2 => ngram_prf(&p, &r, 2),
        RougeVariant::RL => {
            if p.is_empty() && r.is_empty() {
                return Prf::ONE;
            }
            if p.is_empty() || r.is_empty() {
                return Prf::ZERO;
            }
            Prf::from_counts(lcs_len(&p, &r), p.len(), r.len())
        }
    }
}

fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Supplies sentence embeddings for [`FsimKind::EmbeddingPlugin`].
/// Vectors must share one dimension and should be unit-norm.
pub trait EmbeddingProvider: Send + Sync {
    fn embed(&self, text: &str) -> Vec<f64>;
}

fn registry() -> &'static RwLock<BTreeMap<String, Arc<dyn EmbeddingProvider>>> {
    static REGISTRY: OnceLock<RwLock<BTreeMap<String, Arc<dyn EmbeddingProvider>>>> = OnceLock::new();
    REGISTRY.get_or_init(|| RwLock::new(BTreeMap::new()))
}

pub fn register_embedding_provider(id: impl Into<String>, provider: Arc<dyn EmbeddingProvider>) {
    registry().write().expect("registry poisoned").insert(id.into(), provider);
}

pub fn embedding_provider(id: &str) -> Option<Arc<dyn EmbeddingProvider>> {
    registry().read().expect("registry poisoned").get(id).cloned()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsimKind {
    #[default]
    UnigramF1,
    EmbeddingPlugin,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FsimConfig {
    pub kind: FsimKind,
    pub plugin_id: Option<String>,
}

impl FsimConfig {
    pub fn plugin(id: impl Into<String>) -> Self {
        FsimConfig {
            kind: FsimKind::EmbeddingPlugin,
            plugin_id: Some(id.into()),
        }
    }

    fn provider(&self) -> Result<Option<Arc<dyn EmbeddingProvider>>> {
        match self.kind {
            FsimKind::UnigramF1 => Ok(None),
            FsimKind::EmbeddingPlugin => {
                let id = self
                    .plugin_id
                    .as_deref()
                    .ok_or_else(|| Error::Config("embedding similarity needs a plugin_id".into()))?;
                embedding_provider(id)
                    .map(Some)
                    .ok_or_else(|| Error::Config(format!("no embedding provider registered as `{id}`")))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.provider().map(|_| ())
    }
}

pub fn similarity(pred: &str, reference: &str, cfg: &FsimConfig, tok: Tokenizer) -> Result<f64> {
    match cfg.provider()? {
        None => Ok(unigram_f1(pred, reference, tok)),
        Some(provider) => {
            let a = provider.embed(pred);
            let b = provider.embed(reference);
            if a.len() != b.len() {
                return Err(Error::Config(format!(
                    "embedding dimensions differ ({} vs {})",
                    a.len(),
                    b.len()
                )));
            }
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let aa: f64 = a.iter().map(|x| x * x).sum();
            let bb: f64 = b.iter().map(|x| x * x).sum();
            if aa == 0.0 || bb == 0.0 {
                return Ok(0.0);
            }
            // One square root of the product: identical vectors give exactly 1.
            Ok((dot / (aa * bb).sqrt()).clamp(0.0, 1.0))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const WS: Tokenizer = Tokenizer::WhitespaceLower;

    #[test]
    fn unigram_f1_fixtures() {
        assert_eq!(unigram_f1("ireland", "ireland", WS), 1.0);
        assert_eq!(unigram_f1("north atlantic", "ireland", WS), 0.0);
        assert_abs_diff_eq!(unigram_f1("ireland weather", "ireland", WS), 2.0 / 3.0, epsilon = 1e-12);
        assert_eq!(unigram_f1("", "", WS), 1.0);
        assert_eq!(unigram_f1("", "x", WS), 0.0);
        assert_eq!(unigram_f1("x", "", WS), 0.0);
        assert_eq!(unigram_f1("Ireland", "ireland", WS), 1.0);
    }

    #[test]
    fn clipping() {
        // pred has "a" twice, ref once: one match.
        assert_abs_diff_eq!(unigram_f1("a a", "a b", WS), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn bleu_fixtures() {
        assert_abs_diff_eq!(bleu(&["the cat sat"], &["the cat sat"], 1, WS).unwrap(), 100.0, epsilon = 1e-9);
        assert_abs_diff_eq!(
            bleu(&["the cat"], &["the cat sat"], 1, WS).unwrap(),
            100.0 * (-0.5f64).exp(),
            epsilon = 1e-9
        );
        assert_abs_diff_eq!(bleu(&["the cat"], &["the cat sat"], 1, WS).unwrap(), 60.65, epsilon = 5e-3);
        assert_eq!(bleu(&["x"], &["y"], 1, WS).unwrap(), 0.0);
        assert!(matches!(bleu(&["x"], &[], 1, WS), Err(Error::Argument(_))));
    }

    #[test]
    fn bleu2_smoothing_rescues_unigram_queries() {
        assert_eq!(bleu(&["ireland"], &["ireland"], 2, WS).unwrap(), 0.0);
        assert_abs_diff_eq!(bleu_with(&["ireland"], &["ireland"], 2, WS, true).unwrap(), 100.0, epsilon = 1e-9);
    }

    #[test]
    fn rouge_fixtures() {
        let p = rouge("a b c", "a b c", RougeVariant::RL, WS);
        assert_eq!((p.precision, p.recall, p.f1), (1.0, 1.0, 1.0));
        let p = rouge("a b c", "a c", RougeVariant::RL, WS);
        assert_abs_diff_eq!(p.precision, 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.recall, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(p.f1, 0.8, epsilon = 1e-12);
        assert_eq!(rouge("a b", "c d", RougeVariant::R2, WS), Prf::ZERO);
        assert_eq!(rouge("", "", RougeVariant::R1, WS), Prf::ONE);
        assert_eq!(rouge("", "a", RougeVariant::RL, WS), Prf::ZERO);
        // Single-token identity is still a perfect ROUGE-2.
        assert_eq!(rouge("ireland", "ireland", RougeVariant::R2, WS), Prf::ONE);
    }

    #[test]
    fn char_tokenizer_splits_code_points() {
        assert_eq!(Tokenizer::Char.tokenize("知识 图谱"), vec!["知", "识", "图", "谱"]);
        assert_abs_diff_eq!(unigram_f1("知识", "知道", Tokenizer::Char), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn similarity_unigram() {
        let cfg = FsimConfig::default();
        assert_eq!(similarity("ireland", "ireland", &cfg, WS).unwrap(), 1.0);
        assert_eq!(similarity("javelin throw", "bowling", &cfg, WS).unwrap(), 0.0);
    }

    struct Constant;
    impl EmbeddingProvider for Constant {
        fn embed(&self, _text: &str) -> Vec<f64> {
            vec![0.6, 0.8]
        }
    }

    struct Opposite;
    impl EmbeddingProvider for Opposite {
        fn embed(&self, text: &str) -> Vec<f64> {
            if text.starts_with('a') {
                vec![1.0, 0.0]
            } else {
                vec![-1.0, 0.0]
            }
        }
    }

    #[test]
    fn similarity_plugin() {
        register_embedding_provider("test-constant", Arc::new(Constant));
        register_embedding_provider("test-opposite", Arc::new(Opposite));
        let cfg = FsimConfig::plugin("test-constant");
        assert_eq!(similarity("anything", "else", &cfg, WS).unwrap(), 1.0);
        // Negative cosine clamps to zero.
        let cfg = FsimConfig::plugin("test-opposite");
        assert_eq!(similarity("abc", "xyz", &cfg, WS).unwrap(), 0.0);
        let missing = FsimConfig::plugin("nope");
        assert!(matches!(similarity("a", "b", &missing, WS), Err(Error::Config(_))));
        assert!(missing.validate().is_err());
    }
}
