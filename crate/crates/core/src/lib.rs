//! Soft patterns: neural weighted finite-state automata for text classification.
//!
//! Each pattern is a linear-chain automaton whose transition weights are
//! functions of word vectors. Document scores under a chosen semiring feed a
//! small MLP classifier.

pub mod autodiff;
pub mod automata;
pub mod classifier;
pub mod embeddings;
pub mod interpret;
pub mod reference;
pub mod semiring;
pub mod synthetic;

pub use automata::{
    encode_document, score_document, trace_best_match, Encoder, MatchTrace, PatternParams,
    PatternSetConfig, PatternSpec, StepKind,
};
pub use classifier::{
    count_parameters, evaluate, forward_logits, random_search, train, ModelBundle, Prediction,
    SearchSpace, TrainConfig,
};
pub use embeddings::{load_dataset, load_embeddings, Embeddings, TokenizedDocument};
pub use semiring::{Semiring, SemiringKind};
