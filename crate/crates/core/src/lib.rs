//! Confidence-based safety filters for controllers acting on stochastic
//! systems whose dynamics are known only through a calibrated model set.

// `!(x > 0.0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod backup;
pub mod cert;
pub mod checkpoint;
pub mod common;
pub mod envs;
pub mod error;
pub mod filter;
pub mod harness;
pub mod model;
pub mod objective;
pub mod value;

pub use common::{Bounds, NoiseKind, NoiseModel, RandomSource, RealVector, Trajectory};
pub use error::{Error, Result};
