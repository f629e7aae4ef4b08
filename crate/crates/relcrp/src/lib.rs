//! Relational Chinese restaurant process topic models for social streams.
//!
//! A post's topic is drawn from a restaurant whose table counts are
//! restricted to the author's neighbourhood under one of four
//! relationships (everyone, the author alone, followees, the author's
//! region), the relationship itself is drawn from a per-user personality,
//! and an optional dynamic mode chains per-epoch models through
//! exponentially decayed historical counts.
//!
//! The crate provides corpus ingestion, an online collapsed Gibbs sampler
//! (sequential and synchronous multi-worker), a forward generator that
//! emits ground truth for recovery tests, and evaluation utilities
//! (held-out perplexity, clustering agreement, trend extraction).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod generator;
pub mod model;
pub mod parallel;
pub mod sampler;
pub mod stats;

pub use corpus::{Corpus, IngestConfig, Post, RelationshipKind, User};
pub use error::{Error, Result};
pub use eval::{
    clustering_scores, detect_major_events, knn_predict, perplexity, personality_trends,
    topic_character, topic_kl, topic_trends, ClusteringScores, FeatureRecord, MajorEvent,
    PerplexityReport, TrendMatrix,
};
pub use generator::{disjoint_seed_topics, generate, GenConfig, GroundTruth};
pub use model::{Assignment, TopicSlot};
pub use parallel::{fit_parallel, ParallelOutcome};
pub use sampler::{fit_sequential, FitOutcome};
pub use stats::{Hyperparams, ModelState, TopicId};
