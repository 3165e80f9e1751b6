//! Evaluation pipeline for advertisement images generated from visually
//! implicit action-reason messages ("I should {action} because {reason}").
//!
//! Three metrics are computed per (image, statement) pair:
//!
//! * **CITE** – contextual image-text alignment. The image is described by a
//!   vision model, a chat model turns the description back into an
//!   action-reason statement, and the action and reason components are
//!   compared with the intended message through embedding similarity.
//! * **C_obj** – creativity. CITE divided by the image/object embedding
//!   similarity, averaged over the objects mentioned in the message.
//! * **PA** – persuasiveness-alignment. Seven LLM-scored persuasion
//!   components plus the reason-alignment term, normalised to `[0, 1]`.
//!
//! All model access goes through [`gateway::Gateway`], which caches every
//! response on disk keyed by the full request, so a run can be replayed
//! bit-for-bit against a warm cache. [`gateway::mock::MockTransport`] provides
//! scripted backends for tests and offline fixtures.
//!
//! The metric arithmetic is generic over [`Scalar`] (any `num_traits::Float`);
//! the pipeline itself stores results as [`Score`] (`f64`).

pub mod agreement;
pub mod annotation;
pub mod cite;
pub mod config;
pub mod creativity;
pub mod dataset;
pub mod forge;
pub mod gateway;
pub mod model;
pub mod models;
pub mod persuasion;
pub mod pipeline;
pub mod prompts;
pub mod report;
mod scalar;

pub use scalar::{cosine_similarity, Scalar};

/// Concrete score type used for persisted results.
pub type Score = f64;

/// Embedding vector as returned by the embedding backends.
pub type Embedding = Vec<f64>;

/// Single-precision variant of the metric arithmetic, handy for callers that
/// keep embeddings as `f32`.
pub type Score32 = f32;

pub use model::{ActionReason, AdClass, AdRecord, Component, ImageRef, Provenance, ScoreCard};
