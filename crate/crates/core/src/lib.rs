//! Grayscale learning-to-rank for dialogue response selection.
//!
//! A matching model is trained with margin losses over response tiers:
//! ground truth above retrieval and generation outputs, which sit above
//! random responses.

pub mod bm25;
pub mod corpus;
pub mod error;
pub mod evaluator;
pub mod generator;
pub mod grayscale;
pub mod matcher;
pub mod objectives;
pub mod synthetic;
pub mod trainer;

pub use bm25::{Bm25Index, Bm25Params, RetrievalHit};
pub use corpus::{
    build_vocab, split_to_pairs, tokenize, Corpus, Dialogue, Label, LabeledExample, Split, TokenId, TurnPair,
    Utterance, Vocab,
};
pub use error::{Error, Result};
pub use evaluator::{evaluate, CandidateGroup, EncodedGroup, MetricConfig, MetricsReport, RecallAt, TieMode};
pub use generator::{BeamParams, GeneratedResponse, GeneratorSource, NGramModel, NGramParams};
pub use grayscale::{build_grayscale, GrayscaleConfig, GrayscaleSet, Tier};
pub use matcher::{DualEncoder, DualEncoderConfig, Scorer, TrainableScorer};
pub use objectives::LossValue;
pub use synthetic::{make_synthetic, SyntheticConfig, SyntheticCorpus};
pub use trainer::{train, ObjectiveMode, TrainConfig, TrainLog, TrainOutcome, TrainingData};
