//! Locating generalization barriers: source words whose replacement or
//! deletion lets a translation model produce a better translation.
//!
//! The crate is organized around the [`TranslationModel`] contract. Risk
//! estimators in [`estimators`] query a model through a [`DecodeCache`],
//! [`toy`] provides an in-process model with planted barriers for
//! validation, and [`analytics`] and [`rerank`] aggregate the resulting
//! [`RiskReport`]s.

pub mod analytics;
pub mod error;
pub mod estimators;
pub mod metrics;
pub mod model;
pub mod rerank;
pub mod text;
pub mod toy;

pub use error::{Error, Result};
pub use estimators::{
    detect_barriers, estimate_risk, truncated_mean, EstimatorConfig, Histogram, Method,
    RiskReport,
};
pub use metrics::{kendall_w, overlap_at_k, sentence_bleu, BleuScore, Ranking};
pub use model::{
    decode_cached, nll_cached, CacheStats, Capabilities, Counted, DecodeCache, ProcessModel,
    TranslationModel,
};
pub use rerank::{CandidateSet, Provenance};
pub use text::{
    apply_edit, edit_set, AnnotatedCorpus, Edit, EditKind, ParallelExample, Sentence, TokenId,
    Vocab,
};
pub use toy::{SynthSpec, ToyConfig, ToyModel};
