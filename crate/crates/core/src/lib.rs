// `!(x > 0.0)` also rejects NaN, which validation relies on.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

//! Sparse-view cone-beam CT reconstruction with clouds of isotropic 3D
//! Gaussians, plus FDK and voxel-iterative baselines.

pub mod density;
pub mod error;
pub mod gaussian;
pub mod geometry;
pub mod initializer;
pub mod io;
pub mod metrics;
pub mod neighbors;
pub mod optim;
pub mod phantom;
pub mod projector;

pub use error::{Error, Result};
