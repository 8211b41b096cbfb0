//! Jacobian-matching knowledge transfer at desk scale.
//!
//! - [`nn`]: layers, one- and two-headed networks, checkpoints.
//! - [`losses`]: activation, Jacobian, attention and norm-penalty losses.
//! - [`lab`]: numerical checks that noisy-input expectations match their
//!   Jacobian expansions.
//! - [`bound`]: asymmetric Hausdorff distance and the transfer bound.
//! - [`data`]: synthetic tasks, binary image loading, per-class subsets.

pub mod bound;
pub mod data;
mod error;
pub mod lab;
pub mod losses;
pub mod nn;

pub use error::{Error, Result};
pub use jacmatch_autodiff as autodiff;
