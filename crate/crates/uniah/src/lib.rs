//! Deterministic needle-in-a-haystack evaluation harness: context assembly,
//! simulated retrieval, backend dispatch, scoring, and log analysis.

pub mod analysis;
pub mod assembly;
pub mod backends;
pub mod cases;
pub mod corpus;
pub mod ragsim;
pub mod runner;
pub mod scoring;
pub mod text;
