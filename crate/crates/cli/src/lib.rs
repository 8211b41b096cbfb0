//! Training loop, experiment grids and verification commands.
//!
//! - [`optim`]: SGD with momentum and Adam with step schedules.
//! - [`config`]: the JSON experiment schema and its content hash.
//! - [`train`]: resumable training runs and their evaluation.
//! - [`grid`]: distillation, robustness, transfer and ablation grids.
//! - [`report`]: multi-seed aggregation.
//! - [`verify`]: noise-equivalence, exactness and transfer-bound checks.

pub mod config;
mod error;
pub mod grid;
pub mod optim;
pub mod report;
pub mod train;
pub mod verify;

pub use error::{CliError, CliResult};
