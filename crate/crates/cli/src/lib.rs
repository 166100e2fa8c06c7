//! Command-line pipeline over the core library: experiment configuration,
//! file-level pipeline stages, scenario runners and result summaries.
//!
//! Everything here is deterministic given the configuration: seeds are
//! derived from the master seed by component path, artifacts are written in
//! fixed orders without timestamps, and parallel sections only fan out work
//! whose outputs are aggregated in a fixed order afterwards.

pub mod config;
pub mod pipeline;
pub mod scenario;
pub mod summary;
