//! Multi-table entity matching.
//!
//! Records from two or more tables are normalized ([`coordination`]),
//! embedded ([`embed`]), paired by mutual nearest neighbours and merged
//! transitively ([`tcem`]), and finally pruned by local density ([`dpm`]).
//! [`pipeline`] strings the stages together; [`eval`] scores the result.

pub mod ann;
pub mod coordination;
pub mod dpm;
pub mod embed;
pub mod error;
pub mod eval;
pub mod pipeline;
pub mod synth;
pub mod tables;
pub mod tcem;

pub use error::{Error, Result};
pub use eval::{score, EvalReport};
pub use pipeline::{run_on_dataset, run_pipeline, PipelineConfig};
pub use tables::{Cluster, Dataset, EntityRef, SourceTable};
