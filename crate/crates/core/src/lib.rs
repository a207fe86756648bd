//! Field-aware prediction with per-instance dependency refinement.
//!
//! Each instance's field embeddings are refined by a few projected-gradient
//! steps on a label-free reconstruction loss before a task network sees them.
//! Training differentiates through those steps.

pub mod backbone;
pub mod cli;
pub mod dependency;
pub mod embedding;
pub mod eval;
pub mod ingest;
pub mod linalg;
pub mod model;
pub mod parallel;
pub mod synthetic;
pub mod trainer;
