//! Semi-supervised generation of search queries from dialogue.
//!
//! A query producer (QP) maps the dialogue history to a search query. A
//! response-augmented producer (RA) also sees the response that followed,
//! which makes it a better teacher than a deployable model. Training runs in
//! three stages:
//!
//! 1. [`stage1`]: both models are trained with cross-entropy on labeled data.
//! 2. [`stage2`]: RA labels an unlabeled corpus; a pseudo query is kept only
//!    when it is similar enough to what QP itself produces, and QP (and
//!    optionally RA) train on the kept instances.
//! 3. [`stage3`]: QP is fine-tuned with REINFORCE, using RA's ranking of
//!    QP's own candidates as the reward.
//!
//! [`baselines`] holds self-training and distillation for comparison,
//! [`eval`] the metrics and ranking analysis, and [`synthbench`] a synthetic
//! benchmark on which the whole pipeline trains in minutes.

pub mod baselines;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod seq2seq;
pub mod stage1;
pub mod stage2;
pub mod stage3;
pub mod synthbench;
pub mod textmetrics;

pub use error::{Error, Result};

/// The guide's chapters, compiled so their snippets run as doctests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../README.md")]
    mod readme {}
    #[doc = include_str!("../../../book/src/data.md")]
    mod data {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/stage1.md")]
    mod stage1 {}
    #[doc = include_str!("../../../book/src/stage2.md")]
    mod stage2 {}
    #[doc = include_str!("../../../book/src/stage3.md")]
    mod stage3 {}
    #[doc = include_str!("../../../book/src/baselines.md")]
    mod baselines {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/synthbench.md")]
    mod synthbench {}
    #[doc = include_str!("../../../book/src/configuration.md")]
    mod configuration {}
    #[doc = include_str!("../../../book/src/backends.md")]
    mod backends {}
    #[doc = include_str!("../../../book/src/quickstart.md")]
    mod quickstart {}
}
