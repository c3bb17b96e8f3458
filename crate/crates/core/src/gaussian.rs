//! Isotropic 3D Gaussian clouds and their truncated rasterization.
//!
//! A Gaussian contributes `I * exp(-|x - mu|^2 / (2 sigma^2))` to every voxel
//! center inside the axis-aligned cube `mu +/- d`, where `d` is the cloud's
//! global extent. Voxels are accumulated in a canonical Gaussian order, so the
//! rasterized grid does not depend on the order of the list.

use std::cmp::Ordering;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{GridSpec, Vec3, VoxelGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian {
    pub mu: Vec3,
    pub sigma: f64,
    pub intensity: f64,
}

impl Gaussian {
    pub fn new(mu: Vec3, sigma: f64, intensity: f64) -> Self {
        Gaussian {
            mu,
            sigma,
            intensity,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.sigma > 0.0
            && self.sigma.is_finite()
            && self.intensity >= 0.0
            && self.intensity.is_finite()
            && self.mu.iter().all(|m| m.is_finite())
    }

    fn canonical_cmp(&self, other: &Gaussian) -> Ordering {
        self.mu[0]
            .total_cmp(&other.mu[0])
            .then(self.mu[1].total_cmp(&other.mu[1]))
            .then(self.mu[2].total_cmp(&other.mu[2]))
            .then(self.sigma.total_cmp(&other.sigma))
            .then(self.intensity.total_cmp(&other.intensity))
    }
}

/// Value of a single Gaussian at world point `x`.
pub fn eval_gaussian(g: &Gaussian, x: Vec3) -> f64 {
    let r2 = (x[0] - g.mu[0]).powi(2) + (x[1] - g.mu[1]).powi(2) + (x[2] - g.mu[2]).powi(2);
    g.intensity * (-r2 / (2.0 * g.sigma * g.sigma)).exp()
}

/// Per-Gaussian statistics of `dL/dmu` since the last density-control event.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradAccum {
    /// Running sum of `|dL/dmu|`.
    pub norm_sum: Vec<f64>,
    /// Running sum of the `dL/dmu` vectors, used as the clone direction.
    pub vec_sum: Vec<Vec3>,
    pub count: Vec<u32>,
}

impl GradAccum {
    pub fn zeros(n: usize) -> Self {
        GradAccum {
            norm_sum: vec![0.0; n],
            vec_sum: vec![[0.0; 3]; n],
            count: vec![0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.norm_sum.len()
    }

    pub fn is_empty(&self) -> bool {
        self.norm_sum.is_empty()
    }

    pub fn add(&mut self, grads: &[GaussianGrad]) {
        for (i, g) in grads.iter().enumerate() {
            let n = (g.mu[0] * g.mu[0] + g.mu[1] * g.mu[1] + g.mu[2] * g.mu[2]).sqrt();
            self.norm_sum[i] += n;
            for a in 0..3 {
                self.vec_sum[i][a] += g.mu[a];
            }
            self.count[i] += 1;
        }
    }

    /// Mean gradient norm of Gaussian `i`, zero if never accumulated.
    pub fn mean_norm(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            self.norm_sum[i] / self.count[i] as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub gaussians: Vec<Gaussian>,
    pub grad_accum: GradAccum,
    /// Truncation half-width `d` of every Gaussian's footprint.
    pub extent: f64,
}

impl GaussianCloud {
    pub fn new(gaussians: Vec<Gaussian>, extent: f64) -> Result<Self> {
        if !(extent > 0.0) || !extent.is_finite() {
            return Err(Error::config("extent", "must be > 0"));
        }
        if let Some(i) = gaussians.iter().position(|g| !g.is_valid()) {
            return Err(Error::config(
                "gaussians",
                format!("gaussian {i} is invalid: {:?}", gaussians[i]),
            ));
        }
        Ok(GaussianCloud {
            grad_accum: GradAccum::zeros(gaussians.len()),
            gaussians,
            extent,
        })
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn reset_grad_accum(&mut self) {
        self.grad_accum = GradAccum::zeros(self.gaussians.len());
    }

    /// Indices of the Gaussians in canonical order.
    fn canonical_order(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.gaussians.len()).collect();
        order.sort_by(|&a, &b| {
            self.gaussians[a]
                .canonical_cmp(&self.gaussians[b])
                .then(a.cmp(&b))
        });
        order
    }
}

/// Gradient of the loss with respect to one Gaussian's parameters.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct GaussianGrad {
    pub mu: Vec3,
    pub sigma: f64,
    pub intensity: f64,
}

/// Inclusive voxel index range along one axis whose centers lie within
/// `center +/- extent`; `None` if it misses the grid.
fn axis_range(spec: &GridSpec, axis: usize, center: f64, extent: f64) -> Option<(usize, usize)> {
    let o = spec.origin[axis];
    let s = spec.spacing[axis];
    let n = spec.dims[axis] as f64;
    let lo = ((center - extent - o) / s).ceil().max(0.0);
    let hi = ((center + extent - o) / s).floor().min(n - 1.0);
    (lo <= hi).then_some((lo as usize, hi as usize))
}

/// Per-axis footprint ranges, offsets from `mu` and separable exp factors.
struct Footprint {
    range: [(usize, usize); 3],
    offset: [Vec<f64>; 3],
    factor: [Vec<f64>; 3],
}

fn footprint(spec: &GridSpec, g: &Gaussian, extent: f64) -> Option<Footprint> {
    let mut range = [(0, 0); 3];
    let mut offset: [Vec<f64>; 3] = Default::default();
    let mut factor: [Vec<f64>; 3] = Default::default();
    let inv = 1.0 / (2.0 * g.sigma * g.sigma);
    for a in 0..3 {
        let (lo, hi) = axis_range(spec, a, g.mu[a], extent)?;
        range[a] = (lo, hi);
        offset[a] = (lo..=hi)
            .map(|i| spec.origin[a] + i as f64 * spec.spacing[a] - g.mu[a])
            .collect();
        factor[a] = offset[a].iter().map(|d| (-d * d * inv).exp()).collect();
    }
    Some(Footprint {
        range,
        offset,
        factor,
    })
}

/// Sum of all Gaussians' truncated contributions at every voxel center.
pub fn rasterize(cloud: &GaussianCloud, spec: &GridSpec) -> VoxelGrid {
    let [nx, ny, nz] = spec.dims;
    let d = cloud.extent;
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); nz];
    for i in cloud.canonical_order() {
        if let Some((lo, hi)) = axis_range(spec, 2, cloud.gaussians[i].mu[2], d) {
            for b in &mut buckets[lo..=hi] {
                b.push(i);
            }
        }
    }
    let mut out = spec.zeros();
    out.data
        .par_chunks_mut(nx * ny)
        .zip(buckets.par_iter())
        .enumerate()
        .for_each(|(z, (slice, members))| {
            for &i in members {
                let g = &cloud.gaussians[i];
                let Some(fp) = footprint_slice(spec, g, d, z) else {
                    continue;
                };
                let (x0, x1) = fp.range[0];
                let (y0, y1) = fp.range[1];
                for (yi, y) in (y0..=y1).enumerate() {
                    let wyz = g.intensity * fp.factor[1][yi] * fp.factor[2][0];
                    let row = &mut slice[y * nx..];
                    for (xi, x) in (x0..=x1).enumerate() {
                        row[x] += wyz * fp.factor[0][xi];
                    }
                }
            }
        });
    out
}

/// Footprint restricted to one z slice.
fn footprint_slice(spec: &GridSpec, g: &Gaussian, extent: f64, z: usize) -> Option<Footprint> {
    let mut range = [(0, 0); 3];
    let mut offset: [Vec<f64>; 3] = Default::default();
    let mut factor: [Vec<f64>; 3] = Default::default();
    let inv = 1.0 / (2.0 * g.sigma * g.sigma);
    for a in 0..2 {
        let (lo, hi) = axis_range(spec, a, g.mu[a], extent)?;
        range[a] = (lo, hi);
        offset[a] = (lo..=hi)
            .map(|i| spec.origin[a] + i as f64 * spec.spacing[a] - g.mu[a])
            .collect();
        factor[a] = offset[a].iter().map(|d| (-d * d * inv).exp()).collect();
    }
    let dz = spec.origin[2] + z as f64 * spec.spacing[2] - g.mu[2];
    range[2] = (z, z);
    offset[2] = vec![dz];
    factor[2] = vec![(-dz * dz * inv).exp()];
    Some(Footprint {
        range,
        offset,
        factor,
    })
}

/// Analytic `dL/dmu`, `dL/dsigma` and `dL/dI` for every Gaussian, given the
/// voxel-space adjoint `dL/dV` and the same truncated footprints as
/// [`rasterize`].
pub fn rasterize_with_grads(
    cloud: &GaussianCloud,
    spec: &GridSpec,
    voxel_adjoint: &VoxelGrid,
) -> Result<Vec<GaussianGrad>> {
    if voxel_adjoint.spec.dims != spec.dims {
        return Err(Error::shape(
            format!("{:?}", spec.dims),
            format!("{:?}", voxel_adjoint.spec.dims),
        ));
    }
    let d = cloud.extent;
    let adj = &voxel_adjoint.data;
    let grads = cloud
        .gaussians
        .par_iter()
        .map(|g| {
            let Some(fp) = footprint(spec, g, d) else {
                return GaussianGrad::default();
            };
            let inv_s2 = 1.0 / (g.sigma * g.sigma);
            let mut gmu = [0.0; 3];
            let mut g_r2 = 0.0;
            let mut g_int = 0.0;
            for (zi, z) in (fp.range[2].0..=fp.range[2].1).enumerate() {
                let dz = fp.offset[2][zi];
                for (yi, y) in (fp.range[1].0..=fp.range[1].1).enumerate() {
                    let dy = fp.offset[1][yi];
                    let eyz = fp.factor[1][yi] * fp.factor[2][zi];
                    let base = spec.index(0, y, z);
                    for (xi, x) in (fp.range[0].0..=fp.range[0].1).enumerate() {
                        let a = adj[base + x];
                        if a == 0.0 {
                            continue;
                        }
                        let dx = fp.offset[0][xi];
                        // adjoint-weighted exp factor
                        let ae = a * eyz * fp.factor[0][xi];
                        g_int += ae;
                        gmu[0] += ae * dx;
                        gmu[1] += ae * dy;
                        gmu[2] += ae * dz;
                        g_r2 += ae * (dx * dx + dy * dy + dz * dz);
                    }
                }
            }
            let i = g.intensity;
            GaussianGrad {
                mu: gmu.map(|v| v * i * inv_s2),
                sigma: g_r2 * i * inv_s2 / g.sigma,
                intensity: g_int,
            }
        })
        .collect();
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_force(gaussians: &[Gaussian], spec: &GridSpec) -> Vec<f64> {
        (0..spec.len())
            .map(|i| {
                let [x, y, z] = spec.coords(i);
                let c = spec.center(x, y, z);
                gaussians.iter().map(|g| eval_gaussian(g, c)).sum()
            })
            .collect()
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize, extent: f64) -> GaussianCloud {
        let gs = (0..n)
            .map(|_| {
                Gaussian::new(
                    [rng.random(), rng.random(), rng.random()],
                    rng.random_range(0.2..1.0) * extent / 3.0,
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        GaussianCloud::new(gs, extent).unwrap()
    }

    #[test]
    fn eval_reference_points() {
        let g = Gaussian::new([0.3, 0.4, 0.5], 0.1, 0.8);
        assert_eq!(eval_gaussian(&g, g.mu), 0.8);
        let at_sigma = eval_gaussian(&g, [0.4, 0.4, 0.5]);
        assert!((at_sigma - 0.8 * 0.606_530_659_712_633_4).abs() < 1e-12);
        let at_3sigma = eval_gaussian(&g, [0.3, 0.4, 0.8]);
        assert!((at_3sigma / 0.8 - 0.011_108_996_538_242_3).abs() < 1e-12);
    }

    #[test]
    fn single_centered_gaussian_is_truncated() {
        let spec = GridSpec::unit_cube([9, 9, 9]).unwrap();
        let center = spec.center(4, 4, 4);
        let cloud = GaussianCloud::new(vec![Gaussian::new(center, 0.05, 0.7)], 0.15).unwrap();
        let v = rasterize(&cloud, &spec);
        assert_eq!(v.get(4, 4, 4), 0.7);
        for i in 0..spec.len() {
            let [x, y, z] = spec.coords(i);
            let c = spec.center(x, y, z);
            let outside = (0..3).any(|a| (c[a] - center[a]).abs() > 0.15 + 1e-12);
            if outside {
                assert_eq!(v.data[i], 0.0);
            } else {
                assert!(v.data[i] > 0.0);
            }
        }
    }

    #[test]
    fn duplicate_gaussian_doubles_field() {
        let spec = GridSpec::unit_cube([8, 8, 8]).unwrap();
        let g = Gaussian::new([0.41, 0.52, 0.47], 0.04, 0.3);
        let one = rasterize(&GaussianCloud::new(vec![g], 0.12).unwrap(), &spec);
        let two = rasterize(&GaussianCloud::new(vec![g, g], 0.12).unwrap(), &spec);
        for (a, b) in one.data.iter().zip(&two.data) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn truncation_error_within_tail_bound() {
        let spec = GridSpec::unit_cube([8, 8, 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cloud = random_cloud(&mut rng, 50, 0.15);
        let fast = rasterize(&cloud, &spec);
        let slow = brute_force(&cloud.gaussians, &spec);
        let i_max = cloud
            .gaussians
            .iter()
            .map(|g| g.intensity)
            .fold(0.0, f64::max);
        let bound = 50.0 * i_max * (-4.5f64).exp();
        for (a, b) in fast.data.iter().zip(&slow) {
            assert!((a - b).abs() <= bound);
            assert!(*a <= *b + 1e-12);
        }
    }

    #[test]
    fn zero_adjoint_gives_zero_grads() {
        let spec = GridSpec::unit_cube([8, 8, 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = random_cloud(&mut rng, 10, 0.2);
        let grads = rasterize_with_grads(&cloud, &spec, &spec.zeros()).unwrap();
        assert!(grads.iter().all(|g| *g == GaussianGrad::default()));
    }

    #[test]
    fn symmetric_adjoint_gives_zero_mu_grad() {
        let spec = GridSpec::unit_cube([9, 9, 9]).unwrap();
        let center = spec.center(4, 4, 4);
        let mut adj = spec.zeros();
        for i in 0..spec.len() {
            let [x, y, z] = spec.coords(i);
            let c = spec.center(x, y, z);
            let r2: f64 = (0..3).map(|a| (c[a] - center[a]).powi(2)).sum();
            adj.data[i] = (-r2 * 20.0).exp();
        }
        let cloud = GaussianCloud::new(vec![Gaussian::new(center, 0.06, 0.5)], 0.2).unwrap();
        let g = rasterize_with_grads(&cloud, &spec, &adj).unwrap()[0];
        for a in 0..3 {
            assert!(g.mu[a].abs() < 1e-12, "{:?}", g.mu);
        }
        assert!(g.sigma > 0.0 && g.intensity > 0.0);
    }

    #[test]
    fn adjoint_shape_mismatch_rejected() {
        let spec = GridSpec::unit_cube([8, 8, 8]).unwrap();
        let other = GridSpec::unit_cube([8, 8, 4]).unwrap();
        let cloud = GaussianCloud::new(vec![Gaussian::new([0.5; 3], 0.05, 0.5)], 0.2).unwrap();
        assert!(rasterize_with_grads(&cloud, &spec, &other.zeros()).is_err());
    }

    #[test]
    fn grads_match_finite_differences_of_linear_functional() {
        // L(V) = <w, V> has dL/dV = w; checks each parameter derivative.
        let spec = GridSpec::unit_cube([8, 8, 8]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = VoxelGrid::from_data(spec, (0..spec.len()).map(|_| rng.random()).collect())
            .unwrap();
        // extent large enough that footprints cover the whole grid
        let mut cloud = random_cloud(&mut rng, 4, 3.0);
        for g in &mut cloud.gaussians {
            g.sigma = rng.random_range(0.08..0.2);
        }
        let loss = |c: &GaussianCloud| -> f64 {
            rasterize(c, &spec)
                .data
                .iter()
                .zip(&w.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        let grads = rasterize_with_grads(&cloud, &spec, &w).unwrap();
        let h = 1e-5;
        for i in 0..cloud.len() {
            let check = |f: &dyn Fn(&mut Gaussian, f64), analytic: f64| {
                let mut p = cloud.clone();
                f(&mut p.gaussians[i], h);
                let mut m = cloud.clone();
                f(&mut m.gaussians[i], -h);
                let fd = (loss(&p) - loss(&m)) / (2.0 * h);
                assert!(
                    (fd - analytic).abs() <= 1e-5 * analytic.abs().max(1.0),
                    "{fd} vs {analytic}"
                );
            };
            for a in 0..3 {
                check(&|g: &mut Gaussian, e| g.mu[a] += e, grads[i].mu[a]);
            }
            check(&|g: &mut Gaussian, e| g.sigma += e, grads[i].sigma);
            check(&|g: &mut Gaussian, e| g.intensity += e, grads[i].intensity);
        }
    }

    #[test]
    fn rasterization_is_permutation_invariant_and_linear_in_intensity() {
        let spec = GridSpec::unit_cube([10, 10, 10]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cloud = random_cloud(&mut rng, 40, 0.2);
        let base = rasterize(&cloud, &spec);
        let mut shuffled = cloud.clone();
        shuffled.gaussians.reverse();
        shuffled.gaussians.swap(3, 17);
        assert_eq!(rasterize(&shuffled, &spec).data, base.data);

        let mut doubled = cloud.clone();
        for g in &mut doubled.gaussians {
            g.intensity *= 2.0;
        }
        let v2 = rasterize(&doubled, &spec);
        for (a, b) in base.data.iter().zip(&v2.data) {
            assert_eq!(*b, 2.0 * a);
        }
    }

    #[test]
    fn gaussian_straddling_boundary_only_touches_grid() {
        let spec = GridSpec::unit_cube([8, 8, 8]).unwrap();
        let cloud = GaussianCloud::new(vec![Gaussian::new([0.0, 0.0, 0.0], 0.05, 1.0)], 0.15).unwrap();
        let v = rasterize(&cloud, &spec);
        assert!(v.get(0, 0, 0) > 0.0);
        assert_eq!(v.get(2, 0, 0), 0.0);
        let far = GaussianCloud::new(vec![Gaussian::new([1.5, 0.5, 0.5], 0.05, 1.0)], 0.15).unwrap();
        assert!(rasterize(&far, &spec).data.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn invalid_cloud_rejected() {
        assert!(GaussianCloud::new(vec![Gaussian::new([0.5; 3], 0.0, 1.0)], 0.1).is_err());
        assert!(GaussianCloud::new(vec![Gaussian::new([0.5; 3], 0.1, -1.0)], 0.1).is_err());
        assert!(GaussianCloud::new(vec![], 0.0).is_err());
    }
}
