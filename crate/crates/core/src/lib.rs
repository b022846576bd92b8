//! Diversity-driven group policy optimization on a graded-vocabulary
//! dialogue world.
//!
//! The crate is split along the pipeline:
//!
//! - [`text`]: tokenization, sentence splitting, lemmatization, Rouge-L.
//! - [`lexicon`]: graded vocabulary and the vocabulary-violation check.
//! - [`reward`]: quality, single-turn and multi-turn diversity rewards.
//! - [`policy`]: log-linear autoregressive policy with analytic gradients.
//! - [`simenv`]: scripted user simulator and multi-turn group rollouts.
//! - [`optim`]: per-turn advantages, clipped surrogate, training loop.
//! - [`decode`]: trie-masked constrained decoding baseline.
//! - [`eval`]: diversity, violation rate, collapse probe, judge client.

pub mod decode;
pub mod error;
pub mod eval;
pub mod lexicon;
pub mod optim;
pub mod policy;
pub mod reward;
pub mod simenv;
pub mod text;

pub use error::{Error, Result};
pub use lexicon::{GradedLexicon, Level, ViolationReport};
pub use optim::{GroupBatch, MetricRow, Mode, TrainConfig, TrainOutcome};
pub use policy::{PolicyParams, ResponseSample, Vocabulary};
pub use reward::{RewardBreakdown, WeightSchedule, Weights};
pub use simenv::{Scenario, Trajectory, UserSimulator, World};
pub use text::{rouge_l_f1, tokenize, TokenSeq};
