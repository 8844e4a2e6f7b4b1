//! Streaming joint speech recognition and disfluency detection.

pub mod corpus;
pub mod ctc;
pub mod encoder;
pub mod error;
pub mod config;
pub mod eval;
pub mod lm;
pub mod model;
pub mod search;
pub mod tagger;
pub mod training;
pub mod nn;
pub mod tagging;

pub use config::RunConfig;
pub use corpus::{AcousticFeatures, LabeledUtterance, SynthesisSpec, Vocabulary};
pub use encoder::BlockPlan;
pub use error::{Error, Result};
pub use eval::{LabeledTranscript, ScoreReport};
pub use model::{JointModel, ModelConfig, ObjectiveMode};
pub use search::{beam_search, greedy_search, ScoredHypothesis, SearchConfig};
pub use tagging::{AlignmentPath, EditOp, Enriched};
