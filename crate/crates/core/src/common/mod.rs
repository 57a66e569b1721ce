//! Shared vocabulary: finite vectors, boxes, noise, seeded randomness and
//! trajectory roll-outs with discounted accumulation.

pub mod cem;
pub mod linalg;
mod noise;
mod policy;
mod random;
mod rollout;
mod vector;

pub use noise::{NoiseKind, NoiseModel};
pub use policy::{ConstantPolicy, FnPolicy, Policy};
pub use random::RandomSource;
pub use rollout::{discounted_cost, discounted_return, rollout, tail_bound, truncation_horizon, Trajectory};
pub use vector::{distance, norm, Bounds, RealVector};
