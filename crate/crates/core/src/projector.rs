//! Ray-driven cone-beam projector, its matched adjoint, and FDK reconstruction.
//!
//! Each detector element integrates the trilinearly interpolated volume along
//! the ray from the source to the element center. Samples sit at the midpoints
//! of `n = ceil(L / step)` equal sub-intervals of the ray's chord `L` through
//! the grid box, with `step = 0.5 * min(spacing)`. Interpolation clamps to the
//! edge voxel inside the box, so a homogeneous grid integrates to its exact
//! chord length.
//!
//! [`back_project`] scatters the exact weights [`forward_project`] gathers, so
//! the pair satisfies `<Ax, y> = <x, A^T y>` up to rounding.

use std::f64::consts::PI;

use rayon::prelude::*;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    dot, norm, sub, ConeBeamGeometry, GridSpec, ProjectionStack, Vec3, VoxelGrid, ISOCENTER,
};

/// One ray's sampling pattern in continuous voxel coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct RaySamples {
    /// Voxel coordinate of the first sample.
    start: Vec3,
    /// Voxel-coordinate increment between samples.
    delta: Vec3,
    count: usize,
    /// World length represented by each sample.
    weight: f64,
}

#[derive(Debug, Clone, Copy)]
struct AxisWeights {
    i0: usize,
    i1: usize,
    frac: f64,
}

#[inline(always)]
fn axis_weights(q: f64, n: usize) -> AxisWeights {
    if n == 1 {
        return AxisWeights {
            i0: 0,
            i1: 0,
            frac: 0.0,
        };
    }
    let hi = (n - 1) as f64;
    let qc = q.clamp(0.0, hi);
    let i0 = (qc.floor() as usize).min(n - 2);
    AxisWeights {
        i0,
        i1: i0 + 1,
        frac: qc - i0 as f64,
    }
}

/// Calls `f(index, weight)` for the eight trilinear taps at voxel coordinate `q`.
#[inline(always)]
fn trilinear_taps(spec: &GridSpec, q: Vec3, mut f: impl FnMut(usize, f64)) {
    let [nx, ny, nz] = spec.dims;
    let ax = axis_weights(q[0], nx);
    let ay = axis_weights(q[1], ny);
    let az = axis_weights(q[2], nz);
    let (wx0, wx1) = (1.0 - ax.frac, ax.frac);
    let (wy0, wy1) = (1.0 - ay.frac, ay.frac);
    let (wz0, wz1) = (1.0 - az.frac, az.frac);
    let row = |y: usize, z: usize| nx * (y + ny * z);
    let r00 = row(ay.i0, az.i0);
    let r10 = row(ay.i1, az.i0);
    let r01 = row(ay.i0, az.i1);
    let r11 = row(ay.i1, az.i1);
    f(r00 + ax.i0, wx0 * wy0 * wz0);
    f(r00 + ax.i1, wx1 * wy0 * wz0);
    f(r10 + ax.i0, wx0 * wy1 * wz0);
    f(r10 + ax.i1, wx1 * wy1 * wz0);
    f(r01 + ax.i0, wx0 * wy0 * wz1);
    f(r01 + ax.i1, wx1 * wy0 * wz1);
    f(r11 + ax.i0, wx0 * wy1 * wz1);
    f(r11 + ax.i1, wx1 * wy1 * wz1);
}

/// Slab-method intersection of the ray `origin + t * dir` with a box.
fn intersect_box(origin: Vec3, dir: Vec3, lo: Vec3, hi: Vec3) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if dir[a].abs() < 1e-300 {
            if origin[a] < lo[a] || origin[a] > hi[a] {
                return None;
            }
            continue;
        }
        let inv = 1.0 / dir[a];
        let mut ta = (lo[a] - origin[a]) * inv;
        let mut tb = (hi[a] - origin[a]) * inv;
        if ta > tb {
            std::mem::swap(&mut ta, &mut tb);
        }
        t0 = t0.max(ta);
        t1 = t1.min(tb);
    }
    let t0 = t0.max(0.0);
    (t1 > t0).then_some((t0, t1))
}

pub(crate) fn ray_samples(spec: &GridSpec, source: Vec3, target: Vec3) -> Option<RaySamples> {
    let d = sub(target, source);
    let len = norm(d);
    let dir = [d[0] / len, d[1] / len, d[2] / len];
    let (lo, hi) = spec.bounds();
    let (t0, t1) = intersect_box(source, dir, lo, hi)?;
    let chord = t1 - t0;
    let step = 0.5 * spec.min_spacing();
    let count = (chord / step).ceil().max(1.0) as usize;
    let h = chord / count as f64;
    let q_src = spec.world_to_voxel(source);
    let dq = [
        dir[0] / spec.spacing[0],
        dir[1] / spec.spacing[1],
        dir[2] / spec.spacing[2],
    ];
    let t_first = t0 + 0.5 * h;
    Some(RaySamples {
        start: [
            q_src[0] + t_first * dq[0],
            q_src[1] + t_first * dq[1],
            q_src[2] + t_first * dq[2],
        ],
        delta: [h * dq[0], h * dq[1], h * dq[2]],
        count,
        weight: h,
    })
}

impl RaySamples {
    #[inline]
    fn for_each_tap(&self, spec: &GridSpec, mut f: impl FnMut(usize, f64)) {
        for j in 0..self.count {
            let t = j as f64;
            let q = [
                self.start[0] + t * self.delta[0],
                self.start[1] + t * self.delta[1],
                self.start[2] + t * self.delta[2],
            ];
            trilinear_taps(spec, q, &mut f);
        }
    }
}

/// Voxels touched by one detector ray and their summed system-matrix weights,
/// in first-touch order.
pub fn ray_footprint(
    spec: &GridSpec,
    geom: &ConeBeamGeometry,
    view: usize,
    row: usize,
    col: usize,
) -> Vec<(usize, f64)> {
    let frame = geom.frame(view);
    let target = geom.pixel_center(&frame, row, col);
    let Some(ray) = ray_samples(spec, frame.source, target) else {
        return Vec::new();
    };
    let mut out: Vec<(usize, f64)> = Vec::new();
    ray.for_each_tap(spec, |i, w| {
        if w == 0.0 {
            return;
        }
        match out.iter_mut().find(|(j, _)| *j == i) {
            Some(e) => e.1 += w * ray.weight,
            None => out.push((i, w * ray.weight)),
        }
    });
    out
}

fn check_geometry(spec: &GridSpec, geom: &ConeBeamGeometry) -> Result<()> {
    geom.validate()?;
    geom.check_source_outside(spec)
}

/// Line integrals of `grid` for every detector element of every view.
pub fn forward_project(grid: &VoxelGrid, geom: &ConeBeamGeometry) -> Result<ProjectionStack> {
    let spec = &grid.spec;
    check_geometry(spec, geom)?;
    let mut out = ProjectionStack::zeros(geom);
    let cols = geom.cols();
    let rows = geom.rows();
    let frames: Vec<_> = (0..geom.num_views()).map(|v| geom.frame(v)).collect();
    let data = &grid.data;
    out.data
        .par_chunks_mut(cols)
        .enumerate()
        .for_each(|(line, row_out)| {
            let view = line / rows;
            let row = line % rows;
            let frame = &frames[view];
            for (col, value) in row_out.iter_mut().enumerate() {
                let target = geom.pixel_center(frame, row, col);
                let Some(ray) = ray_samples(spec, frame.source, target) else {
                    continue;
                };
                let mut acc = 0.0;
                ray.for_each_tap(spec, |i, w| acc += w * data[i]);
                *value = acc * ray.weight;
            }
        });
    Ok(out)
}

/// Exact adjoint of [`forward_project`].
pub fn back_project(proj: &ProjectionStack, spec: &GridSpec) -> Result<VoxelGrid> {
    let geom = &proj.geometry;
    check_geometry(spec, geom)?;
    if proj.data.len() != geom.num_elements() {
        return Err(Error::shape(geom.num_elements(), proj.data.len()));
    }
    let rows = geom.rows();
    let cols = geom.cols();
    let partials: Vec<Vec<f64>> = (0..geom.num_views())
        .into_par_iter()
        .map(|view| {
            let frame = geom.frame(view);
            let values = proj.view(view);
            let mut acc = vec![0.0; spec.len()];
            for row in 0..rows {
                for col in 0..cols {
                    let y = values[row * cols + col];
                    if y == 0.0 {
                        continue;
                    }
                    let target = geom.pixel_center(&frame, row, col);
                    let Some(ray) = ray_samples(spec, frame.source, target) else {
                        continue;
                    };
                    let s = y * ray.weight;
                    ray.for_each_tap(spec, |i, w| acc[i] += w * s);
                }
            }
            acc
        })
        .collect();
    let mut out = spec.zeros();
    merge_in_order(&mut out.data, &partials);
    Ok(out)
}

/// `out[i] = sum_k partials[k][i]`, always summed in `k` order.
pub(crate) fn merge_in_order(out: &mut [f64], partials: &[Vec<f64>]) {
    const CHUNK: usize = 4096;
    out.par_chunks_mut(CHUNK)
        .enumerate()
        .for_each(|(c, chunk)| {
            let base = c * CHUNK;
            for (j, o) in chunk.iter_mut().enumerate() {
                let mut s = 0.0;
                for p in partials {
                    s += p[base + j];
                }
                *o = s;
            }
        });
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterKind {
    RamLak,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RampFilter {
    pub kind: FilterKind,
    /// Fraction of the Nyquist frequency kept, in `(0, 1]`.
    pub frequency_scaling: f64,
}

impl Default for RampFilter {
    fn default() -> Self {
        RampFilter {
            kind: FilterKind::RamLak,
            frequency_scaling: 1.0,
        }
    }
}

impl RampFilter {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency_scaling > 0.0 && self.frequency_scaling <= 1.0) {
            return Err(Error::config("frequency_scaling", "must lie in (0, 1]"));
        }
        Ok(())
    }

    /// Real frequency response for an FFT of length `n` with sample pitch `tau`.
    ///
    /// Built from the band-limited spatial Ram-Lak kernel so the DC bin is
    /// not forced to zero.
    pub fn response(&self, n: usize, tau: f64) -> Vec<f64> {
        let mut kernel = vec![Complex::new(0.0, 0.0); n];
        kernel[0].re = 1.0 / (4.0 * tau * tau);
        for k in 1..=n / 2 {
            if k % 2 == 1 {
                let v = -1.0 / (PI * PI * (k * k) as f64 * tau * tau);
                kernel[k].re = v;
                if k != n - k {
                    kernel[n - k].re = v;
                }
            }
        }
        FftPlanner::new().plan_fft_forward(n).process(&mut kernel);
        let cutoff = self.frequency_scaling * (n / 2) as f64;
        kernel
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let f = k.min(n - k) as f64;
                if f > cutoff + 1e-9 {
                    0.0
                } else {
                    c.re
                }
            })
            .collect()
    }
}

/// Cosine-weighted, ramp-filtered projections on the virtual detector
/// through the isocenter.
fn filter_projections(proj: &ProjectionStack, filter: &RampFilter) -> Vec<f64> {
    let geom = &proj.geometry;
    let rows = geom.rows();
    let cols = geom.cols();
    let ds = geom.source_distance;
    let mag = ds / (ds + geom.detector_distance);
    let tau = geom.detector_pixel_size[1] * mag;
    let n = (2 * cols).next_power_of_two();
    let response = filter.response(n, tau);
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let norm = tau / n as f64;

    let mut out = vec![0.0; proj.data.len()];
    out.par_chunks_mut(cols)
        .zip(proj.data.par_chunks(cols))
        .enumerate()
        .for_each_init(
            || vec![Complex::new(0.0, 0.0); n],
            |buf, (line, (dst, src))| {
                let row = line % rows;
                for c in buf.iter_mut() {
                    *c = Complex::new(0.0, 0.0);
                }
                for col in 0..cols {
                    let (u, v) = geom.pixel_offset(row, col);
                    let (u, v) = (u * mag, v * mag);
                    let w = ds / (ds * ds + u * u + v * v).sqrt();
                    buf[col].re = src[col] * w;
                }
                fwd.process(buf);
                for (c, r) in buf.iter_mut().zip(&response) {
                    *c *= *r;
                }
                inv.process(buf);
                for col in 0..cols {
                    dst[col] = buf[col].re * norm;
                }
            },
        );
    out
}

#[inline]
fn bilinear_detector(view: &[f64], rows: usize, cols: usize, r: f64, c: f64) -> f64 {
    if r < 0.0 || c < 0.0 || r > (rows - 1) as f64 || c > (cols - 1) as f64 {
        return 0.0;
    }
    let r0 = (r.floor() as usize).min(rows.saturating_sub(2));
    let c0 = (c.floor() as usize).min(cols.saturating_sub(2));
    let r1 = (r0 + 1).min(rows - 1);
    let c1 = (c0 + 1).min(cols - 1);
    let fr = r - r0 as f64;
    let fc = c - c0 as f64;
    let at = |i: usize, j: usize| view[i * cols + j];
    (1.0 - fr) * ((1.0 - fc) * at(r0, c0) + fc * at(r0, c1))
        + fr * ((1.0 - fc) * at(r1, c0) + fc * at(r1, c1))
}

/// FDK-style filtered backprojection; output clamped to be nonnegative.
///
/// The semicircle is treated as a full scan for weighting purposes, which
/// gives an angular normalization of `pi / num_views` either way.
pub fn fbp_reconstruct(
    proj: &ProjectionStack,
    spec: &GridSpec,
    filter: &RampFilter,
) -> Result<VoxelGrid> {
    filter.validate()?;
    let geom = &proj.geometry;
    check_geometry(spec, geom)?;
    if proj.data.len() != geom.num_elements() {
        return Err(Error::shape(geom.num_elements(), proj.data.len()));
    }
    let filtered = filter_projections(proj, filter);
    let rows = geom.rows();
    let cols = geom.cols();
    let per_view = rows * cols;
    let ds = geom.source_distance;
    let dsd = ds + geom.detector_distance;
    let frames: Vec<_> = (0..geom.num_views()).map(|v| geom.frame(v)).collect();
    let dtheta = PI / geom.num_views() as f64;
    let [nx, ny, _] = spec.dims;
    let row_c = 0.5 * (rows as f64 - 1.0);
    let col_c = 0.5 * (cols as f64 - 1.0);

    let mut out = spec.zeros();
    out.data
        .par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slice)| {
            for y in 0..ny {
                for x in 0..nx {
                    let rel = sub(spec.center(x, y, z), ISOCENTER);
                    let mut acc = 0.0;
                    for (view, frame) in frames.iter().enumerate() {
                        let depth = ds - dot(rel, frame.source_dir);
                        let mag = dsd / depth;
                        let u = dot(rel, frame.u_axis) * mag;
                        let v = dot(rel, frame.v_axis) * mag;
                        let c = u / geom.detector_pixel_size[1] + col_c;
                        let r = v / geom.detector_pixel_size[0] + row_c;
                        let w = (ds / depth) * (ds / depth);
                        let values = &filtered[view * per_view..(view + 1) * per_view];
                        acc += w * bilinear_detector(values, rows, cols, r, c);
                    }
                    slice[x + nx * y] = (acc * dtheta).max(0.0);
                }
            }
        });
    Ok(out)
}
