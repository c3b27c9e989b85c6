//! Preference-pair construction, margin-loss ranker training, and ranking
//! evaluation for community-QA answer data.
//!
//! The pipeline runs in stages: ingest a post archive, embed and index the
//! questions, mine related questions and evidence, construct preference
//! pairs under axioms 0-5, fill per-pair margins, gate pair types against
//! human judgments, train the linear scorer on the pairwise margin
//! objective, and evaluate with MRR/NDCG/accuracy/agreement.

pub mod axioms;
pub mod corpus;
pub mod embed;
pub mod error;
pub mod eval;
pub mod gateway;
pub mod margin;
pub mod pipeline;
pub mod scorer;
pub mod text;

pub use error::{Error, Result};
