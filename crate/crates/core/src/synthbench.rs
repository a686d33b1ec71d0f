//! Synthetic dialogue-to-query benchmark.
//!
//! Every instance is about one topic token, which is also its gold query.
//! Histories are filler chatter that either names the topic or, for
//! referring instances, only says "it" while the response names the topic.
//! Distractor instances put a second, unrelated topic in the response, next
//! to the gold topic.
//!
//! Topic popularity is Zipfian. A domain shift changes the unlabeled, dev
//! and test splits: topic popularity is rotated, the gold topic of a
//! two-topic history is always the later mention (the source domain picks
//! either), responses to non-referring histories that bring up a distractor
//! drop the gold topic, and filler words never seen in the labeled split may
//! appear.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{strip_labels, Dataset, DialogueInstance, Turn};
use crate::error::{Error, Result};
use crate::eval::Document;

const FILLER: &[&str] = &[
    "i", "you", "the", "a", "really", "like", "know", "think", "about", "have", "been", "there", "would", "love",
    "to", "heard", "is", "so", "what", "do", "tell", "me", "yes", "great", "good", "interesting", "sure", "and",
    "but", "was", "that", "we", "they", "go", "see", "want", "never", "always", "much", "very", "lot", "of",
    "place", "thing", "people", "some", "my", "friend", "once", "how", "well", "fun", "nice", "oh", "ever",
];

/// Filler that only occurs in the target domain.
const TARGET_FILLER: &[&str] = &[
    "actually", "guess", "pretty", "cool", "watch", "wonder", "read", "visit", "hear", "talk", "play", "learn",
    "music", "travel", "food", "history", "season", "city", "game", "team", "book", "show", "old", "new",
    "big", "small", "best", "last", "next", "week", "year", "day", "back", "around", "still", "maybe",
];

const PRONOUN: &str = "it";

/// Differences between the source (labeled) and target domains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DomainShift {
    /// Target popularity rank `r` belongs to source rank `r + remap` (mod the
    /// topic count), so target favorites are rare in the source.
    pub remap: usize,
    /// Probability that a non-referring history mentions two topics in
    /// different turns. In the source domain either one may be the gold
    /// topic; in the target domain it is always the later one.
    pub two_topic_rate: f64,
    /// Probability that a target-domain filler word comes from the
    /// target-only list.
    pub filler_rate: f64,
}

impl Default for DomainShift {
    fn default() -> Self {
        DomainShift {
            remap: 40,
            two_topic_rate: 0.5,
            filler_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub vocab_topics: usize,
    pub distractor_rate: f64,
    pub referring_rate: f64,
    pub seed: u64,
    pub domain_shift: Option<DomainShift>,
    /// Exponent of the Zipf law over topic popularity.
    pub zipf: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_labeled: 2000,
            n_unlabeled: 10000,
            n_dev: 300,
            n_test: 500,
            vocab_topics: 120,
            distractor_rate: 0.3,
            referring_rate: 0.5,
            seed: 0,
            domain_shift: None,
            zipf: 1.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("n_labeled", self.n_labeled),
            ("n_unlabeled", self.n_unlabeled),
            ("n_dev", self.n_dev),
            ("n_test", self.n_test),
            ("vocab_topics", self.vocab_topics),
        ] {
            if n == 0 {
                return Err(Error::Config(format!("synth: {name} must be positive")));
            }
        }
        for (name, r) in [("distractor_rate", self.distractor_rate), ("referring_rate", self.referring_rate)] {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::Config(format!("synth: {name} {r} outside [0, 1]")));
            }
        }
        if self.distractor_rate > 0.0 && self.vocab_topics < 2 {
            return Err(Error::Config("synth: distractors need at least 2 topics".into()));
        }
        if self.vocab_topics > max_topics() {
            return Err(Error::Config(format!(
                "synth: at most {} distinct topics can be generated, {} requested",
                max_topics(),
                self.vocab_topics
            )));
        }
        if let Some(d) = self.domain_shift {
            for (name, r) in [("two_topic_rate", d.two_topic_rate), ("filler_rate", d.filler_rate)] {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::Config(format!("synth: {name} {r} outside [0, 1]")));
                }
            }
            if d.two_topic_rate > 0.0 && self.vocab_topics < 2 {
                return Err(Error::Config("synth: two-topic histories need at least 2 topics".into()));
            }
        }
        if !(self.zipf >= 0.0 && self.zipf.is_finite()) {
            return Err(Error::Config(format!("synth: invalid zipf exponent {}", self.zipf)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpus {
    pub labeled: Dataset,
    pub unlabeled: Dataset,
    pub dev: Dataset,
    pub test: Dataset,
    pub topics: Vec<String>,
}

const ONSETS: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z"];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u"];

fn all_names() -> Vec<String> {
    let mut all = vec![];
    for a in ONSETS {
        for b in VOWELS {
            for c in ONSETS {
                for d in VOWELS {
                    for e in ONSETS {
                        all.push(format!("{a}{b}{c}{d}{e}"));
                    }
                }
            }
        }
    }
    all.retain(|w| !FILLER.contains(&w.as_str()) && !TARGET_FILLER.contains(&w.as_str()) && w != PRONOUN);
    all
}

fn max_topics() -> usize {
    all_names().len()
}

/// Distinct pronounceable CVCVC topic names, none of which is a filler word.
pub fn topic_names(n: usize, seed: u64) -> Vec<String> {
    let mut all = all_names();
    all.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7091c5));
    all.truncate(n);
    all
}

pub fn title_of(topic: &str) -> String {
    let mut c = topic.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}

struct Sampler {
    topics: Vec<String>,
    popularity: WeightedIndex<f64>,
    shift: DomainShift,
    shifted: bool,
    cfg: SynthConfig,
}

impl Sampler {
    fn new(cfg: &SynthConfig) -> Self {
        let topics = topic_names(cfg.vocab_topics, cfg.seed);
        let zipf: Vec<f64> = (0..cfg.vocab_topics).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf)).collect();
        Sampler {
            topics,
            popularity: WeightedIndex::new(&zipf).expect("positive weights"),
            shift: cfg.domain_shift.unwrap_or(DomainShift {
                remap: 0,
                two_topic_rate: 0.0,
                filler_rate: 0.0,
            }),
            shifted: cfg.domain_shift.is_some(),
            cfg: cfg.clone(),
        }
    }

    /// Index into `topics` of a topic drawn from the domain's popularity law.
    fn topic(&self, rng: &mut ChaCha8Rng, target_domain: bool) -> usize {
        let r = self.popularity.sample(rng);
        if target_domain {
            (r + self.shift.remap) % self.topics.len()
        } else {
            r
        }
    }

    fn filler(&self, rng: &mut ChaCha8Rng, target_domain: bool, lo: usize, hi: usize) -> Vec<String> {
        (0..rng.gen_range(lo..=hi))
            .map(|_| {
                let list = if target_domain && rng.gen_bool(self.shift.filler_rate) { TARGET_FILLER } else { FILLER };
                list[rng.gen_range(0..list.len())].to_string()
            })
            .collect()
    }

    fn insert(rng: &mut ChaCha8Rng, words: &mut Vec<String>, w: &str) {
        let at = rng.gen_range(0..=words.len());
        words.insert(at, w.to_string());
    }

    fn instance(&self, id: String, target_domain: bool, rng: &mut ChaCha8Rng) -> DialogueInstance {
        let gold = self.topic(rng, target_domain);
        let topic = &self.topics[gold];
        let referring = rng.gen_bool(self.cfg.referring_rate);
        let distractor = rng.gen_bool(self.cfg.distractor_rate);

        let n_turns = rng.gen_range(2..=3);
        let mut turns: Vec<Vec<String>> = (0..n_turns).map(|_| self.filler(rng, target_domain, 3, 6)).collect();
        if referring {
            let last = turns.last_mut().expect("at least two turns");
            Self::insert(rng, last, PRONOUN);
        } else if rng.gen_bool(self.shift.two_topic_rate) {
            let mut other = self.topic(rng, target_domain);
            while other == gold {
                other = self.topic(rng, target_domain);
            }
            let k = rng.gen_range(1..n_turns);
            let j = rng.gen_range(0..k);
            // Source conversations may return to an earlier topic; target ones
            // always query the latest.
            let (late, early) = if target_domain || rng.gen_bool(0.5) { (gold, other) } else { (other, gold) };
            Self::insert(rng, &mut turns[k], &self.topics[late]);
            Self::insert(rng, &mut turns[j], &self.topics[early]);
        } else {
            let k = rng.gen_range(0..n_turns);
            Self::insert(rng, &mut turns[k], topic);
        }
        // Alternate speakers so that the last history turn is the user's.
        let history = turns
            .into_iter()
            .enumerate()
            .map(|(i, words)| {
                let text = words.join(" ");
                if (n_turns - 1 - i) % 2 == 0 {
                    Turn::user(text)
                } else {
                    Turn::system(text)
                }
            })
            .collect();

        let mut response = self.filler(rng, target_domain, 4, 7);
        if distractor {
            let mut other = self.topic(rng, target_domain);
            while other == gold {
                other = self.topic(rng, target_domain);
            }
            // Source responses that mention a distractor also mention the gold
            // topic; shifted target responses to non-referring histories
            // drift to the distractor alone.
            if referring || !(target_domain && self.shifted) {
                let (a, b) = if rng.gen_bool(0.5) { (topic, &self.topics[other]) } else { (&self.topics[other], topic) };
                let at = rng.gen_range(0..=response.len());
                response.insert(at, b.clone());
                response.insert(at, a.clone());
            } else {
                Self::insert(rng, &mut response, &self.topics[other]);
            }
        } else {
            Self::insert(rng, &mut response, topic);
        }
        DialogueInstance {
            id,
            history,
            response: Some(Turn::system(response.join(" "))),
            gold_query: Some(topic.clone()),
            gold_title: Some(title_of(topic)),
        }
    }

    fn split(&self, name: &str, n: usize, target_domain: bool, salt: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt);
        let instances = (0..n)
            .map(|i| self.instance(format!("{name}-{i:05}"), target_domain, &mut rng))
            .collect();
        Dataset::new(name, instances).expect("generated instances are valid")
    }
}

/// Generates the four splits. Labeled data is drawn from the source domain,
/// the other splits from the (possibly shifted) target domain.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let s = Sampler::new(cfg);
    Ok(SynthCorpus {
        labeled: s.split("labeled", cfg.n_labeled, false, 1),
        unlabeled: strip_labels(&s.split("unlabeled", cfg.n_unlabeled, true, 2)),
        dev: s.split("dev", cfg.n_dev, true, 3),
        test: s.split("test", cfg.n_test, true, 4),
        topics: s.topics,
    })
}

/// One document per topic, titled after it, for the local search index.
pub fn documents(topics: &[String]) -> Vec<Document> {
    topics
        .iter()
        .map(|t| Document {
            title: title_of(t),
            body: format!("{t} is a topic people like to talk about"),
        })
        .collect()
}
