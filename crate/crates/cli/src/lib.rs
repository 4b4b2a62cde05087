//! Library layer of the `uniret` binary: configuration, the stage pipeline,
//! and the standalone subcommand implementations. Kept as a library so
//! integration and acceptance tests can drive full pipelines in-process.

pub mod commands;
pub mod config;
pub mod pipeline;

pub use config::{OutputLayout, PipelineConfig, Stage};
pub use pipeline::{run_pipeline, PipelineOutcome, PipelineReport, StageFailure};
