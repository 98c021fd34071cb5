//! Knowledge-unit coverage analysis, task synthesis and re-evaluation for
//! code-generation benchmarks.
//!
//! The crate is organised bottom-up: [`catalog`] holds the fixed KU
//! taxonomy, [`ingestion`] turns benchmark files and project trees into
//! records, [`detector`] maps code to KU vectors through the model
//! [`gateway`], [`metrics`] and [`stats`] are pure numerics, [`sandbox`]
//! runs candidate code, and [`synthesizer`] / [`evaluator`] compose them.
//! [`report`] renders the machine- and human-readable outputs.

pub mod catalog;
pub mod detector;
pub mod evaluator;
pub mod gateway;
pub mod ingestion;
pub mod metrics;
pub mod pysource;
pub mod report;
pub mod sandbox;
pub mod stats;
pub mod synthesizer;
