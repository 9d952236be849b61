//! Safety-aware reasoning path optimization on a synthetic hazard-mix world.
//!
//! The crate trains a small step policy with reference-path likelihood plus
//! step-anchored contrastive pairs found by temperature-sampled exploration,
//! and scores reasoning paths with exact safety and effectiveness judges.

pub mod config;
pub mod evaluation;
pub mod exploration;
pub mod model;
pub mod optimization;
pub mod pipeline;
pub mod reasoning;
pub mod seed;
pub mod world;
