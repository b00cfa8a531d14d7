//! Progressive thought refinement toolkit.
//!
//! The crate builds thought-refinement training data from weak/strong model
//! collaboration, emits thought-masked training examples, provides a
//! reference implementation of the weighted refinement loss with a
//! finite-difference gradient checker, validates weak/strong separation with
//! the Wilcoxon signed-rank test, and runs and scores the multi-iteration
//! refinement loop at inference time.
//!
//! Pipeline order: [`corpus`] → [`generation`] → [`consistency`] →
//! [`dataset`]. The [`pipeline`] module wires them together behind a single
//! reproducible configuration.

pub mod consistency;
pub mod corpus;
pub mod dataset;
pub mod evalkit;
pub mod generation;
pub mod jsonl;
pub mod pipeline;
pub mod provider;
pub mod ptrloss;
pub mod refineloop;
pub mod stats;
pub mod text;

pub use consistency::{ConsistencyConfig, ConsistencyScore};
pub use corpus::{CleanReport, CleaningRules, LeakageIndex, Query, RawRecord};
pub use dataset::{PtrSample, SpanRole, TrainingExample};
pub use generation::{RefinedAnswer, Thought, ThoughtSequence};
pub use provider::{Client, EmbeddingVector, GenerationParams, ModelEndpoint, ProviderError, Role};
pub use ptrloss::{BetaSchedule, LossBreakdown, LossConfig};
pub use stats::{Alternative, PairedScores, WilcoxonResult};
