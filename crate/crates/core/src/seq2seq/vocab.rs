use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{build_model_input, Dataset, InputFormat, Role};
use crate::error::Result;

pub const UNK: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;

const SPECIALS: [&str; 3] = ["<unk>", "<bos>", "<eos>"];

/// Word-level vocabulary. Tokens are lowercased whitespace-separated words;
/// ids 0..3 are `<unk>`, `<bos>`, `<eos>`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl Vocab {
    /// Specials followed by `words` (deduplicated, order kept).
    pub fn from_words<I, S>(words: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        let mut seen: BTreeSet<String> = tokens.iter().cloned().collect();
        for w in words {
            let w = w.into();
            if seen.insert(w.clone()) {
                tokens.push(w);
            }
        }
        Self::from(tokens)
    }

    /// All words occurring at least `min_count` times, sorted.
    /// Every word of the model inputs (response-augmented where a response
    /// exists) and gold queries of the given datasets.
    pub fn from_datasets(datasets: &[&Dataset], format: &InputFormat) -> Result<Self> {
        let mut texts = vec![];
        for ds in datasets {
            for inst in &ds.instances {
                let role = if inst.response.is_some() { Role::Ra } else { Role::Qp };
                texts.push(build_model_input(inst, role, format)?);
                if let Some(q) = &inst.gold_query {
                    texts.push(q.clone());
                }
            }
        }
        Ok(Self::build(texts.iter().map(String::as_str), 1))
    }

    pub fn build<'a, I>(texts: I, min_count: usize) -> Self
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in tokenize(t) {
                *counts.entry(w).or_insert(0) += 1;
            }
        }
        Self::from_words(counts.into_iter().filter(|(_, c)| *c >= min_count).map(|(w, _)| w))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.token(i)).collect::<Vec<_>>().join(" ")
    }
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}
