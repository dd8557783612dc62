//! Self-supervised monocular visual-inertial odometry and depth estimation.
//!
//! The crate couples a differentiable view-synthesis core (depth, pose,
//! rigid flow, inverse warping) with five learnable sub-networks, an
//! adversarial training loop, and an evaluation/robustness harness, all
//! runnable at desk scale on synthetic data with exact ground truth.

pub mod dataio;
pub mod diff;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod losses;
pub mod nets;
pub mod scalar;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Default scalar type for training, evaluation and I/O.
pub type Real = f64;
