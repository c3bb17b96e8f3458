//! Experiment driver for `gaussct`: configuration loading and the
//! `simulate`, `reconstruct`, `ablate`, `metrics` and `export-slices`
//! commands.

pub mod commands;
pub mod config;

use gaussct::Error;

/// Process exit code for an error, by category.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::InvalidConfig { .. } | Error::InvalidGeometry(_)) => 3,
        Some(Error::ShapeMismatch { .. } | Error::InsufficientVoxels { .. }) => 4,
        Some(Error::Io { .. } | Error::Format { .. } | Error::Sidecar { .. }) => 5,
        Some(Error::Diverged { .. }) => 6,
        None if err.chain().any(|e| e.is::<std::io::Error>()) => 5,
        None => 1,
    }
}
