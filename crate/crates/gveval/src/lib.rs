//! LLM-as-judge evaluation for image and video captions.
//!
//! The pipeline builds a chain-of-thought judging prompt for each caption,
//! sends it to a vision-capable chat model, and turns the reply into a
//! score. When token log-probabilities are available the raw integer score
//! is replaced by its probability-weighted expectation, which smooths the
//! metric without extra sampling. Corpus-level agreement with human
//! judgments is measured with Kendall's tau-b and Stuart's tau-c.
//!
//! Module map:
//! - [`model`]: shared domain types and record validation
//! - [`prompt`]: template loading and prompt assembly
//! - [`vision`]: frame sampling, letterboxing, and strip composition
//! - [`oracle`]: backend trait, retries, response cache, mock backend
//! - [`score`]: reply parsing and expected-score computation
//! - [`stats`]: rank correlation and pairwise hallucination accuracy
//! - [`corpus`]: JSON Lines corpora, run manifests, report emission
//! - [`judge`]: one-record evaluation glue on top of the above

pub mod corpus;
pub mod judge;
pub mod model;
pub mod oracle;
pub mod prompt;
pub mod score;
pub mod stats;
pub mod vision;
