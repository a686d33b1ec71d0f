//! Trainable sequence-to-sequence backends.
//!
//! Everything downstream (the three training stages, baselines, evaluation)
//! talks to a model through [`Seq2Seq`]. The crate ships one implementation,
//! [`TinySeq2Seq`], a word-level attention RNN small enough to train on a
//! laptop CPU in seconds.

mod beam;
pub mod checkpoint;
pub mod optim;
pub mod reference;
pub mod vocab;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointBundle, CheckpointHeader, CheckpointMeta, StageTag};
pub use optim::{Adam, OptimizerConfig};
pub use reference::{ModelDims, TinySeq2Seq};
pub use vocab::Vocab;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeStrategy {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub strategy: DecodeStrategy,
    pub beam_size: usize,
    pub num_return: usize,
    /// Maximum number of query tokens, not counting the end token.
    pub max_len: usize,
}

impl DecodeConfig {
    pub const DEFAULT_BEAM: usize = 5;
    pub const DEFAULT_MAX_LEN: usize = 16;

    pub fn greedy() -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Greedy,
            beam_size: 1,
            num_return: 1,
            max_len: Self::DEFAULT_MAX_LEN,
        }
    }

    pub fn beam(beam_size: usize, num_return: usize) -> Self {
        DecodeConfig {
            strategy: DecodeStrategy::Beam,
            beam_size,
            num_return,
            max_len: Self::DEFAULT_MAX_LEN,
        }
    }

    pub fn with_max_len(mut self, max_len: usize) -> Self {
        self.max_len = max_len;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 || self.num_return == 0 || self.max_len == 0 {
            return Err(Error::Config("decode: beam_size, num_return and max_len must be >= 1".into()));
        }
        match self.strategy {
            DecodeStrategy::Greedy if self.num_return != 1 => {
                Err(Error::Config("decode: greedy decoding returns exactly one query".into()))
            }
            DecodeStrategy::Beam if self.num_return > self.beam_size => Err(Error::Config(format!(
                "decode: num_return {} exceeds beam_size {}",
                self.num_return, self.beam_size
            ))),
            _ => Ok(()),
        }
    }
}

/// A decoded query with its length-normalized log-probability: the summed
/// token log-probabilities (end token included) divided by the token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredQuery {
    pub text: String,
    pub norm_logprob: f64,
}

/// A trainable query producer.
///
/// Implementations are single-writer: training and decoding on one value are
/// serialized by `&mut self`. Cloning yields an independent model.
pub trait Seq2Seq: Clone + Send + Sync + Sized {
    fn backend_id(&self) -> &str;
    fn vocab_size(&self) -> usize;
    fn parameter_count(&self) -> usize;
    fn seed(&self) -> u64;

    /// Resets the optimizer: learning rate, schedule length and moment estimates.
    fn configure_optimizer(&mut self, cfg: OptimizerConfig);

    /// One optimizer update on the mean token-level negative log-likelihood of
    /// the targets. Returns that loss, measured before the update.
    fn train_step(&mut self, batch: &[(String, String)]) -> Result<f64>;

    /// One optimizer update on `reward * -log p(target | input)` (summed, not
    /// length-normalized). Returns the loss before the update.
    fn reinforce_step(&mut self, input: &str, target: &str, reward: f64) -> Result<f64>;

    fn generate(&self, input: &str, cfg: &DecodeConfig) -> Result<Vec<ScoredQuery>>;

    /// Length-normalized log-probability of `target`; never decodes.
    fn score_sequence(&self, input: &str, target: &str) -> Result<f64>;

    /// [`Seq2Seq::score_sequence`] for several targets sharing one input.
    fn score_many(&self, input: &str, targets: &[&str]) -> Result<Vec<f64>> {
        targets.iter().map(|t| self.score_sequence(input, t)).collect()
    }

    /// Same architecture and vocabulary, freshly initialized from `seed`.
    fn reinitialized(&self, seed: u64) -> Self;

    fn to_blob(&self) -> Vec<u8>;
    fn from_blob(bytes: &[u8]) -> Result<Self>;

    fn greedy(&self, input: &str) -> Result<ScoredQuery> {
        let mut out = self.generate(input, &DecodeConfig::greedy())?;
        Ok(out.remove(0))
    }
}
