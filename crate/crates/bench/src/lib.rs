//! Benchmark harness: phantom suites, training with a checkpoint cache,
//! propagation with uncertainty, evaluation and report files.

pub mod benchmark;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod report;
pub mod training;

pub use error::{BenchError, Result};
