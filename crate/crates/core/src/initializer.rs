//! Initial Gaussian placement from an FDK reconstruction.
//!
//! Centers come from foreground voxels whose gradient norm falls in a middle
//! percentile band: flat interiors sit below it and streak artifacts above it.
//! Each Gaussian's width shrinks with the local density of selected centers and
//! its intensity follows the FDK value under it.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::geometry::{Vec3, VoxelGrid};
use crate::neighbors::neighbor_counts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub num_gaussians: usize,
    /// Emptiness threshold on the FDK volume.
    pub tau: f64,
    /// Neighbor search radius; `None` means one voxel diagonal.
    pub neighbor_radius: Option<f64>,
    pub k_sigma: f64,
    pub k_intensity: f64,
    /// Percentile band `(lo, hi)` of gradient norms treated as "medium".
    pub gradient_band: [f64; 2],
    /// Truncation half-width `d` given to the cloud.
    pub extent: f64,
    /// Uniform baseline: shared sigma is `k_sigma * uniform_sigma_scale`.
    pub uniform_sigma_scale: f64,
    /// Uniform baseline: shared intensity is `k_intensity * uniform_intensity_level`.
    pub uniform_intensity_level: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            num_gaussians: 15_000,
            tau: 0.05,
            neighbor_radius: None,
            k_sigma: 0.12,
            k_intensity: 0.3,
            gradient_band: [30.0, 90.0],
            extent: 0.05,
            uniform_sigma_scale: 0.1,
            uniform_intensity_level: 0.5,
        }
    }
}

impl InitConfig {
    /// Abdominal coefficients (`k_sigma = 0.12`, `k_I = 0.3`).
    pub fn abdomen() -> Self {
        Self::default()
    }

    /// Chest coefficients (`k_sigma = 0.25`, `k_I = 0.15`).
    pub fn chest() -> Self {
        InitConfig {
            k_sigma: 0.25,
            k_intensity: 0.15,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_gaussians == 0 {
            return Err(Error::config("num_gaussians", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config("tau", "must lie in [0, 1)"));
        }
        if let Some(r) = self.neighbor_radius {
            if !(r > 0.0) {
                return Err(Error::config("neighbor_radius", "must be > 0"));
            }
        }
        if !(self.k_sigma > 0.0) {
            return Err(Error::config("k_sigma", "must be > 0"));
        }
        if !(self.k_intensity > 0.0) {
            return Err(Error::config("k_intensity", "must be > 0"));
        }
        let [lo, hi] = self.gradient_band;
        if !(0.0 <= lo && lo < hi && hi <= 100.0) {
            return Err(Error::config("gradient_band", "need 0 <= lo < hi <= 100"));
        }
        if !(self.extent > 0.0) {
            return Err(Error::config("extent", "must be > 0"));
        }
        if !(self.uniform_sigma_scale > 0.0) {
            return Err(Error::config("uniform_sigma_scale", "must be > 0"));
        }
        if !(self.uniform_intensity_level > 0.0) {
            return Err(Error::config("uniform_intensity_level", "must be > 0"));
        }
        Ok(())
    }
}

/// Keeps voxels strictly above `tau`, zeroes the rest.
pub fn threshold_fbp(fbp: &VoxelGrid, tau: f64) -> VoxelGrid {
    VoxelGrid {
        spec: fbp.spec,
        data: fbp
            .data
            .iter()
            .map(|&v| if v > tau { v } else { 0.0 })
            .collect(),
    }
}

/// `|grad V|` per voxel: central differences inside, one-sided at borders.
pub fn gradient_norms(v: &VoxelGrid) -> Vec<f64> {
    let spec = &v.spec;
    let dims = spec.dims;
    let mut out = vec![0.0; spec.len()];
    for (i, o) in out.iter_mut().enumerate() {
        let c = spec.coords(i);
        let mut s = 0.0;
        for a in 0..3 {
            let n = dims[a];
            if n == 1 {
                continue;
            }
            let mut lo = c;
            let mut hi = c;
            lo[a] = c[a].saturating_sub(1);
            hi[a] = (c[a] + 1).min(n - 1);
            let span = (hi[a] - lo[a]) as f64 * spec.spacing[a];
            let d = (v.get(hi[0], hi[1], hi[2]) - v.get(lo[0], lo[1], lo[2])) / span;
            s += d * d;
        }
        *o = s.sqrt();
    }
    out
}

#[derive(Debug, Clone)]
pub struct CenterSelection {
    /// Selected voxel indices, ascending.
    pub voxels: Vec<usize>,
    pub points: Vec<Vec3>,
    /// Percentile band actually used after any widening.
    pub band: [f64; 2],
    pub warnings: Vec<String>,
}

fn percentile(sorted: &[f64], p: f64, round_up: bool) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let k = if round_up { pos.ceil() } else { pos.floor() } as usize;
    sorted[k.min(sorted.len() - 1)]
}

/// Draws `count` voxel centers uniformly from the nonzero voxels whose gradient
/// norm lies in the `[lo, hi]` percentile band (inclusive value bounds).
///
/// A band holding fewer than `count` voxels is widened symmetrically in 5-point
/// steps toward `[0, 100]`, with a warning.
pub fn select_centers(
    thresholded: &VoxelGrid,
    count: usize,
    gradient_band: [f64; 2],
    rng: &mut impl Rng,
) -> Result<CenterSelection> {
    let foreground: Vec<usize> = (0..thresholded.data.len())
        .filter(|&i| thresholded.data[i] != 0.0)
        .collect();
    if foreground.len() < count {
        return Err(Error::InsufficientVoxels {
            needed: count,
            available: foreground.len(),
        });
    }
    let grad = gradient_norms(thresholded);
    let mut sorted: Vec<f64> = foreground.iter().map(|&i| grad[i]).collect();
    sorted.sort_by(f64::total_cmp);

    let [mut lo, mut hi] = gradient_band;
    let mut warnings = Vec::new();
    let band = loop {
        let q_lo = percentile(&sorted, lo, false);
        let q_hi = percentile(&sorted, hi, true);
        let band: Vec<usize> = foreground
            .iter()
            .copied()
            .filter(|&i| grad[i] >= q_lo && grad[i] <= q_hi)
            .collect();
        if band.len() >= count || (lo <= 0.0 && hi >= 100.0) {
            break band;
        }
        lo = (lo - 5.0).max(0.0);
        hi = (hi + 5.0).min(100.0);
        let msg = format!(
            "gradient band holds {} voxels, fewer than {count}; widening to [{lo}, {hi}]",
            band.len()
        );
        warn!("{msg}");
        warnings.push(msg);
    };

    let mut voxels: Vec<usize> = rand::seq::index::sample(rng, band.len(), count)
        .into_iter()
        .map(|k| band[k])
        .collect();
    voxels.sort_unstable();
    let spec = &thresholded.spec;
    let points = voxels
        .iter()
        .map(|&i| {
            let [x, y, z] = spec.coords(i);
            spec.center(x, y, z)
        })
        .collect();
    Ok(CenterSelection {
        voxels,
        points,
        band: [lo, hi],
        warnings,
    })
}

/// Radius from neighbor count: `k_sigma / max(n, 1)`, capped at `extent / 3`.
pub fn sigma_from_neighbors(k_sigma: f64, neighbors: usize, extent: f64) -> f64 {
    (k_sigma / neighbors.max(1) as f64).min(extent / 3.0)
}

pub fn init_from_fbp(fbp: &VoxelGrid, cfg: &InitConfig, rng: &mut impl Rng) -> Result<GaussianCloud> {
    cfg.validate()?;
    let thresholded = threshold_fbp(fbp, cfg.tau);
    let sel = select_centers(&thresholded, cfg.num_gaussians, cfg.gradient_band, rng)?;
    let radius = cfg
        .neighbor_radius
        .unwrap_or(fbp.spec.voxel_diagonal());
    let counts = neighbor_counts(&sel.points, radius);
    let gaussians = sel
        .voxels
        .iter()
        .zip(&sel.points)
        .zip(&counts)
        .map(|((&v, &p), &n)| {
            Gaussian::new(
                p,
                sigma_from_neighbors(cfg.k_sigma, n, cfg.extent),
                cfg.k_intensity * thresholded.data[v],
            )
        })
        .collect();
    GaussianCloud::new(gaussians, cfg.extent)
}

/// Baseline: centers uniform over the foreground, one shared sigma and intensity.
pub fn init_uniform(fbp: &VoxelGrid, cfg: &InitConfig, rng: &mut impl Rng) -> Result<GaussianCloud> {
    cfg.validate()?;
    let spec = &fbp.spec;
    let foreground: Vec<usize> = (0..fbp.data.len())
        .filter(|&i| fbp.data[i] > cfg.tau)
        .collect();
    if foreground.is_empty() || foreground.len() < cfg.num_gaussians {
        return Err(Error::InsufficientVoxels {
            needed: cfg.num_gaussians,
            available: foreground.len(),
        });
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, foreground.len(), cfg.num_gaussians)
        .into_iter()
        .map(|k| foreground[k])
        .collect();
    picked.sort_unstable();
    let sigma = (cfg.k_sigma * cfg.uniform_sigma_scale).min(cfg.extent / 3.0);
    let intensity = cfg.k_intensity * cfg.uniform_intensity_level;
    let gaussians = picked
        .into_iter()
        .map(|i| {
            let [x, y, z] = spec.coords(i);
            Gaussian::new(spec.center(x, y, z), sigma, intensity)
        })
        .collect();
    GaussianCloud::new(gaussians, cfg.extent)
}
