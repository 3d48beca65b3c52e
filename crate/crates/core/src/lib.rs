//! Mirrored Stein variational samplers for constrained and non-Euclidean
//! targets.

pub mod error;
pub mod fd;
pub mod fields;
pub mod geometry;
pub mod harness;
pub mod kernels;
pub mod metrics;
pub mod particles;
pub mod samplers;
pub mod spectral;
pub mod stein;
pub mod targets;

pub use error::{Error, Result};
pub use geometry::{Domain, MirrorMap};
pub use kernels::{KernelFamily, ScalarKernel};

/// Library version.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
