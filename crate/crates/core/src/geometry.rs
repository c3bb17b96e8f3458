//! Scan geometry, voxel grids and projection stacks.
//!
//! World coordinates live in the normalized cube `[0, 1]^3`. The scanner
//! rotates about the z axis through the isocenter `(0.5, 0.5, 0.5)`; detector
//! rows run along +z and detector columns along the in-plane tangent.
//!
//! Voxel storage is x-fastest: `index = x + nx * (y + ny * z)`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];

/// Rotation center shared by every geometry.
pub const ISOCENTER: Vec3 = [0.5, 0.5, 0.5];

const BOX_TOLERANCE: f64 = 1e-9;

#[inline]
pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub(crate) fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub(crate) fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub(crate) fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Shape and placement of a voxel grid, without data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub dims: [usize; 3],
    /// World coordinate of the center of voxel (0, 0, 0).
    pub origin: Vec3,
    pub spacing: Vec3,
}

impl GridSpec {
    pub fn new(dims: [usize; 3], origin: Vec3, spacing: Vec3) -> Result<Self> {
        let spec = GridSpec {
            dims,
            origin,
            spacing,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Grid whose voxels tile `[0, 1]^3` exactly.
    pub fn unit_cube(dims: [usize; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::config("dims", "every dimension must be >= 1"));
        }
        let spacing = dims.map(|d| 1.0 / d as f64);
        Self::new(dims, spacing.map(|s| 0.5 * s), spacing)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.contains(&0) {
            return Err(Error::config("dims", "every dimension must be >= 1"));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::config("spacing", "every component must be > 0"));
        }
        if self.origin.iter().any(|o| !o.is_finite()) {
            return Err(Error::config("origin", "must be finite"));
        }
        let (lo, hi) = self.bounds();
        for a in 0..3 {
            if lo[a] < -BOX_TOLERANCE || hi[a] > 1.0 + BOX_TOLERANCE {
                return Err(Error::config(
                    "origin",
                    format!("grid box [{lo:?}, {hi:?}] leaves the unit cube"),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, index: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [index % nx, (index / nx) % ny, index / (nx * ny)]
    }

    /// Axis-aligned world box covered by the voxels (outer faces, not centers).
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = self.origin[a] - 0.5 * self.spacing[a];
            hi[a] = self.origin[a] + (self.dims[a] as f64 - 0.5) * self.spacing[a];
        }
        (lo, hi)
    }

    pub fn world_to_voxel(&self, p: Vec3) -> Vec3 {
        [
            (p[0] - self.origin[0]) / self.spacing[0],
            (p[1] - self.origin[1]) / self.spacing[1],
            (p[2] - self.origin[2]) / self.spacing[2],
        ]
    }

    pub fn voxel_to_world(&self, q: Vec3) -> Vec3 {
        [
            self.origin[0] + q[0] * self.spacing[0],
            self.origin[1] + q[1] * self.spacing[1],
            self.origin[2] + q[2] * self.spacing[2],
        ]
    }

    /// World position of the center of voxel `(x, y, z)`.
    #[inline]
    pub fn center(&self, x: usize, y: usize, z: usize) -> Vec3 {
        [
            self.origin[0] + x as f64 * self.spacing[0],
            self.origin[1] + y as f64 * self.spacing[1],
            self.origin[2] + z as f64 * self.spacing[2],
        ]
    }

    pub fn min_spacing(&self) -> f64 {
        self.spacing.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn voxel_diagonal(&self) -> f64 {
        norm(self.spacing)
    }

    pub fn zeros(&self) -> VoxelGrid {
        VoxelGrid {
            spec: *self,
            data: vec![0.0; self.len()],
        }
    }
}

/// Dense scalar field on a [`GridSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub spec: GridSpec,
    pub data: Vec<f64>,
}

impl VoxelGrid {
    pub fn from_data(spec: GridSpec, data: Vec<f64>) -> Result<Self> {
        if data.len() != spec.len() {
            return Err(Error::shape(
                format!("{} voxels for dims {:?}", spec.len(), spec.dims),
                data.len(),
            ));
        }
        Ok(VoxelGrid { spec, data })
    }

    pub fn filled(spec: GridSpec, value: f64) -> Self {
        VoxelGrid {
            spec,
            data: vec![value; spec.len()],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.spec.index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, z: usize, v: f64) {
        let i = self.spec.index(x, y, z);
        self.data[i] = v;
    }

    pub fn dims(&self) -> [usize; 3] {
        self.spec.dims
    }

    pub(crate) fn check_same_shape(&self, other: &VoxelGrid) -> Result<()> {
        if self.spec.dims != other.spec.dims {
            return Err(Error::shape(
                format!("{:?}", self.spec.dims),
                format!("{:?}", other.spec.dims),
            ));
        }
        Ok(())
    }
}

/// Circular cone-beam scan about the z axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConeBeamGeometry {
    /// Isocenter to source distance.
    pub source_distance: f64,
    /// Isocenter to detector plane distance.
    pub detector_distance: f64,
    /// `(rows, cols)`.
    pub detector_shape: [usize; 2],
    /// Pixel pitch `(row, col)` in world units.
    pub detector_pixel_size: [f64; 2],
    pub angles: Vec<f64>,
}

/// Source position and detector frame for one view.
#[derive(Debug, Clone, Copy)]
pub struct ViewFrame {
    pub source: Vec3,
    /// Unit vector from the isocenter toward the source.
    pub source_dir: Vec3,
    pub detector_center: Vec3,
    /// Column direction.
    pub u_axis: Vec3,
    /// Row direction.
    pub v_axis: Vec3,
}

impl ConeBeamGeometry {
    pub fn validate(&self) -> Result<()> {
        if !(self.source_distance > 0.0) || !self.source_distance.is_finite() {
            return Err(Error::config("source_distance", "must be > 0"));
        }
        if !(self.detector_distance > 0.0) || !self.detector_distance.is_finite() {
            return Err(Error::config("detector_distance", "must be > 0"));
        }
        if self.detector_shape.contains(&0) {
            return Err(Error::config("detector_shape", "components must be >= 1"));
        }
        if self
            .detector_pixel_size
            .iter()
            .any(|&p| !(p > 0.0) || !p.is_finite())
        {
            return Err(Error::config("pixel_size", "components must be > 0"));
        }
        if self.angles.is_empty() {
            return Err(Error::config("angles", "need at least one view"));
        }
        for w in self.angles.windows(2) {
            if !(w[1] > w[0]) {
                return Err(Error::config("angles", "must be strictly increasing"));
            }
        }
        if self.angles.iter().any(|&a| !(0.0..2.0 * PI).contains(&a)) {
            return Err(Error::config("angles", "must lie in [0, 2*pi)"));
        }
        Ok(())
    }

    pub fn num_views(&self) -> usize {
        self.angles.len()
    }

    pub fn rows(&self) -> usize {
        self.detector_shape[0]
    }

    pub fn cols(&self) -> usize {
        self.detector_shape[1]
    }

    /// Number of detector elements over all views.
    pub fn num_elements(&self) -> usize {
        self.num_views() * self.rows() * self.cols()
    }

    pub fn frame(&self, view: usize) -> ViewFrame {
        let (s, c) = self.angles[view].sin_cos();
        let source_dir = [c, s, 0.0];
        ViewFrame {
            source: add(ISOCENTER, scale(source_dir, self.source_distance)),
            source_dir,
            detector_center: add(ISOCENTER, scale(source_dir, -self.detector_distance)),
            u_axis: [-s, c, 0.0],
            v_axis: [0.0, 0.0, 1.0],
        }
    }

    /// Offset of a detector pixel center from the detector center, `(u, v)`.
    #[inline]
    pub fn pixel_offset(&self, row: usize, col: usize) -> (f64, f64) {
        let u = (col as f64 - 0.5 * (self.cols() as f64 - 1.0)) * self.detector_pixel_size[1];
        let v = (row as f64 - 0.5 * (self.rows() as f64 - 1.0)) * self.detector_pixel_size[0];
        (u, v)
    }

    /// World position of a detector pixel center.
    pub fn pixel_center(&self, frame: &ViewFrame, row: usize, col: usize) -> Vec3 {
        let (u, v) = self.pixel_offset(row, col);
        add(
            frame.detector_center,
            add(scale(frame.u_axis, u), scale(frame.v_axis, v)),
        )
    }

    /// Fails if the source enters the grid box at any view angle.
    pub fn check_source_outside(&self, grid: &GridSpec) -> Result<()> {
        let (lo, hi) = grid.bounds();
        for view in 0..self.num_views() {
            let s = self.frame(view).source;
            let inside = (0..3).all(|a| s[a] >= lo[a] && s[a] <= hi[a]);
            if inside {
                return Err(Error::InvalidGeometry(format!(
                    "source at view {view} ({s:?}) lies inside the grid box"
                )));
            }
        }
        Ok(())
    }
}

/// Equally spaced views over the half-open semicircle `[0, pi)`.
pub fn make_semicircle_geometry(
    num_views: usize,
    detector_shape: [usize; 2],
    source_distance: f64,
    detector_distance: f64,
    pixel_size: [f64; 2],
) -> Result<ConeBeamGeometry> {
    if num_views == 0 {
        return Err(Error::config("num_views", "must be >= 1"));
    }
    let geom = ConeBeamGeometry {
        source_distance,
        detector_distance,
        detector_shape,
        detector_pixel_size: pixel_size,
        angles: (0..num_views)
            .map(|k| k as f64 * PI / num_views as f64)
            .collect(),
    };
    geom.validate()?;
    Ok(geom)
}

/// Per-view detector measurements, C-order `(view, row, col)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionStack {
    pub geometry: ConeBeamGeometry,
    pub data: Vec<f64>,
}

impl ProjectionStack {
    pub fn zeros(geometry: &ConeBeamGeometry) -> Self {
        ProjectionStack {
            data: vec![0.0; geometry.num_elements()],
            geometry: geometry.clone(),
        }
    }

    pub fn from_data(geometry: ConeBeamGeometry, data: Vec<f64>) -> Result<Self> {
        if data.len() != geometry.num_elements() {
            return Err(Error::shape(
                format!(
                    "{} elements ({} views x {:?})",
                    geometry.num_elements(),
                    geometry.num_views(),
                    geometry.detector_shape
                ),
                data.len(),
            ));
        }
        Ok(ProjectionStack { geometry, data })
    }

    #[inline]
    pub fn index(&self, view: usize, row: usize, col: usize) -> usize {
        (view * self.geometry.rows() + row) * self.geometry.cols() + col
    }

    pub fn view(&self, view: usize) -> &[f64] {
        let n = self.geometry.rows() * self.geometry.cols();
        &self.data[view * n..(view + 1) * n]
    }

    pub(crate) fn check_same_shape(&self, other: &ProjectionStack) -> Result<()> {
        let a = &self.geometry;
        let b = &other.geometry;
        if a.num_views() != b.num_views() || a.detector_shape != b.detector_shape {
            return Err(Error::shape(
                format!("{} views x {:?}", a.num_views(), a.detector_shape),
                format!("{} views x {:?}", b.num_views(), b.detector_shape),
            ));
        }
        Ok(())
    }
}
