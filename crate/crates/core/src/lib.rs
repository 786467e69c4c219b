//! Conversational passage search with knowledge-graph aware answer generation.
//!
//! A turn flows through query rewriting, Dirichlet-smoothed query-likelihood
//! retrieval, re-ranking, entity linking, entity based passage selection and
//! summarisation. Every external model sits behind an adapter trait with a
//! deterministic stub, so the whole pipeline runs offline.

pub mod answer;
pub mod conversation;
pub mod exec;
pub mod graph;
pub mod index;
pub mod interactive;
pub mod linking;
pub mod metrics;
pub mod pipeline;
pub mod remote;
pub mod server;
pub mod text;

pub use answer::{GenerationConfig, ScoringMethod};
pub use conversation::{Conversation, RankedList, Turn};
pub use exec::Execution;
pub use graph::{EntityGraph, EntityMap, EntityRankVector, GraphParams};
pub use index::{InvertedIndex, PassageRecord, RetrievalParams};
pub use linking::{EntityMention, KnowledgeBaseStore};
pub use pipeline::{Pipeline, PipelineConfig, RunRecord};
