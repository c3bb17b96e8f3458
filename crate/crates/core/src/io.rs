//! Raw little-endian `f32` files with JSON sidecars, and PGM slice export.
//!
//! Every binary file `name.raw` is paired with `name.json`. Values are stored
//! as `f32`; anything already representable in `f32` round-trips bit-exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::geometry::{ConeBeamGeometry, GridSpec, ProjectionStack, Vec3, VoxelGrid};

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

fn write_f32(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let bytes: Vec<u8> = values.flat_map(|v| (v as f32).to_le_bytes()).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_f32(path: &Path, expected: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() != 4 * expected {
        return Err(format_err(
            path,
            format!("size mismatch: {} bytes, expected {} floats", bytes.len(), expected),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Sidecar {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text).map_err(io_err(path))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Sidecar {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VolumeHeader {
    dims: [usize; 3],
    spacing: Vec3,
    origin: Vec3,
}

pub fn save_volume(grid: &VoxelGrid, path: &Path) -> Result<()> {
    write_f32(path, grid.data.iter().copied())?;
    let header = VolumeHeader {
        dims: grid.spec.dims,
        spacing: grid.spec.spacing,
        origin: grid.spec.origin,
    };
    write_json(&sidecar_path(path), &header)
}

pub fn load_volume(path: &Path) -> Result<VoxelGrid> {
    let side = sidecar_path(path);
    let h: VolumeHeader = read_json(&side)?;
    let spec = GridSpec::new(h.dims, h.origin, h.spacing)
        .map_err(|e| format_err(&side, e.to_string()))?;
    let data = read_f32(path, spec.len())?;
    VoxelGrid::from_data(spec, data)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProjectionHeader {
    views: usize,
    rows: usize,
    cols: usize,
    angles: Vec<f64>,
    geometry: ConeBeamGeometry,
}

pub fn save_projections(proj: &ProjectionStack, path: &Path) -> Result<()> {
    write_f32(path, proj.data.iter().copied())?;
    let g = &proj.geometry;
    let header = ProjectionHeader {
        views: g.num_views(),
        rows: g.rows(),
        cols: g.cols(),
        angles: g.angles.clone(),
        geometry: g.clone(),
    };
    write_json(&sidecar_path(path), &header)
}

pub fn load_projections(path: &Path) -> Result<ProjectionStack> {
    let side = sidecar_path(path);
    let h: ProjectionHeader = read_json(&side)?;
    let g = h.geometry;
    g.validate().map_err(|e| format_err(&side, e.to_string()))?;
    if h.views != g.num_views() || [h.rows, h.cols] != g.detector_shape || h.angles != g.angles {
        return Err(format_err(&side, "header fields disagree with geometry"));
    }
    let data = read_f32(path, g.num_elements())?;
    ProjectionStack::from_data(g, data)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    count: usize,
    extent_d: f64,
    iteration: usize,
}

/// Writes `count` records of `(mu_x, mu_y, mu_z, sigma, I)`.
pub fn save_checkpoint(cloud: &GaussianCloud, iteration: usize, path: &Path) -> Result<()> {
    write_f32(
        path,
        cloud
            .gaussians
            .iter()
            .flat_map(|g| [g.mu[0], g.mu[1], g.mu[2], g.sigma, g.intensity]),
    )?;
    let header = CheckpointHeader {
        count: cloud.len(),
        extent_d: cloud.extent,
        iteration,
    };
    write_json(&sidecar_path(path), &header)
}

/// Returns the cloud and the iteration it was saved at.
pub fn load_checkpoint(path: &Path) -> Result<(GaussianCloud, usize)> {
    let h: CheckpointHeader = read_json(&sidecar_path(path))?;
    let raw = read_f32(path, 5 * h.count)?;
    let gaussians = raw
        .chunks_exact(5)
        .map(|r| Gaussian::new([r[0], r[1], r[2]], r[3], r[4]))
        .collect();
    let cloud = GaussianCloud::new(gaussians, h.extent_d)
        .map_err(|e| format_err(path, e.to_string()))?;
    Ok((cloud, h.iteration))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" => Ok(Axis::X),
            "y" => Ok(Axis::Y),
            "z" => Ok(Axis::Z),
            other => Err(Error::config("axis", format!("expected x, y or z, got `{other}`"))),
        }
    }
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes one binary PGM (P5) per slice perpendicular to `axis`, mapping
/// `[0, 1]` linearly onto `[0, 255]`. Returns the written paths.
pub fn export_slices(grid: &VoxelGrid, dir: &Path, axis: Axis) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let [nx, ny, nz] = grid.dims();
    let (count, w, h) = match axis {
        Axis::X => (nx, ny, nz),
        Axis::Y => (ny, nx, nz),
        Axis::Z => (nz, nx, ny),
    };
    let tag = match axis {
        Axis::X => 'x',
        Axis::Y => 'y',
        Axis::Z => 'z',
    };
    let mut paths = Vec::with_capacity(count);
    for k in 0..count {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        for j in 0..h {
            for i in 0..w {
                let v = match axis {
                    Axis::X => grid.get(k, i, j),
                    Axis::Y => grid.get(i, k, j),
                    Axis::Z => grid.get(i, j, k),
                };
                bytes.push(to_byte(v));
            }
        }
        let path = dir.join(format!("slice_{tag}_{k:04}.pgm"));
        fs::write(&path, bytes).map_err(io_err(&path))?;
        paths.push(path);
    }
    Ok(paths)
}
