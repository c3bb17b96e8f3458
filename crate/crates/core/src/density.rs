//! Adaptive density control: clone, split and prune.
//!
//! Gaussians whose mean world-space `|dL/dmu|` since the last event exceeds the
//! threshold are densified. Narrow ones (`sigma <= d/3`) are cloned, wide ones
//! are split into two narrower children sampled from the parent. Afterwards
//! near-transparent and oversized Gaussians are pruned.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{Gaussian, GaussianCloud};
use crate::geometry::Vec3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensityConfig {
    pub enabled: bool,
    /// First iteration at which an event may fire.
    pub start_iteration: usize,
    pub interval: usize,
    /// No events at or after this iteration; `None` keeps densifying to the end.
    pub stop_iteration: Option<usize>,
    /// Mean `|dL/dmu|` above which a Gaussian is densified.
    pub grad_threshold: f64,
    pub min_intensity: f64,
    /// Prune ceiling on sigma; `None` means twice the cloud extent.
    pub max_sigma: Option<f64>,
    pub max_gaussians: usize,
    pub split_sigma_factor: f64,
    /// Scale split children's intensity by `factor^3 / 2` so the pair carries
    /// the parent's integrated mass. Off keeps the parent intensity.
    pub split_preserves_mass: bool,
}

impl Default for DensityConfig {
    fn default() -> Self {
        DensityConfig {
            enabled: true,
            start_iteration: 100,
            interval: 100,
            stop_iteration: None,
            grad_threshold: 2e-2,
            min_intensity: 0.001,
            max_sigma: None,
            max_gaussians: 40_000,
            split_sigma_factor: 1.6,
            split_preserves_mass: false,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.interval == 0 {
            return Err(Error::config("interval", "must be >= 1"));
        }
        if !(self.grad_threshold > 0.0) {
            return Err(Error::config("grad_threshold", "must be > 0"));
        }
        if !(self.min_intensity > 0.0) {
            return Err(Error::config("min_intensity", "must be > 0"));
        }
        if let Some(s) = self.max_sigma {
            if !(s > 0.0) {
                return Err(Error::config("max_sigma", "must be > 0"));
            }
        }
        if self.max_gaussians == 0 {
            return Err(Error::config("max_gaussians", "must be >= 1"));
        }
        if !(self.split_sigma_factor > 1.0) {
            return Err(Error::config("split_sigma_factor", "must be > 1"));
        }
        Ok(())
    }

    pub fn max_sigma_for(&self, extent: f64) -> f64 {
        self.max_sigma.unwrap_or(2.0 * extent)
    }

    /// Whether an event fires after `iteration` completed steps.
    pub fn fires_at(&self, iteration: usize) -> bool {
        self.enabled
            && iteration >= self.start_iteration
            && iteration > 0
            && (iteration - self.start_iteration).is_multiple_of(self.interval)
            && self.stop_iteration.is_none_or(|stop| iteration < stop)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct DensityReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
    pub n_after: usize,
}

/// Where a post-event Gaussian came from, indexing the pre-event list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Lineage {
    Kept(usize),
    Cloned(usize),
    Split(usize),
}

fn clamp_unit(p: Vec3) -> Vec3 {
    p.map(|c| c.clamp(0.0, 1.0))
}

/// Two half-intensity copies; the second is displaced by `sigma / 2` against
/// `grad_mu`.
pub fn clone_gaussian(g: &Gaussian, grad_mu: Vec3) -> [Gaussian; 2] {
    let half = Gaussian {
        intensity: 0.5 * g.intensity,
        ..*g
    };
    let n = (grad_mu[0] * grad_mu[0] + grad_mu[1] * grad_mu[1] + grad_mu[2] * grad_mu[2]).sqrt();
    let moved = if n > 0.0 && n.is_finite() {
        let step = 0.5 * g.sigma / n;
        Gaussian {
            mu: clamp_unit([
                g.mu[0] - step * grad_mu[0],
                g.mu[1] - step * grad_mu[1],
                g.mu[2] - step * grad_mu[2],
            ]),
            ..half
        }
    } else {
        half
    };
    [half, moved]
}

/// Two children with `sigma / factor`, centers drawn from `N(mu, sigma^2 I)`.
pub fn split_gaussian(g: &Gaussian, factor: f64, rng: &mut impl Rng) -> [Gaussian; 2] {
    let mut child = || {
        let mut mu = g.mu;
        for m in &mut mu {
            let z: f64 = rng.sample(StandardNormal);
            *m += g.sigma * z;
        }
        Gaussian {
            mu: clamp_unit(mu),
            sigma: g.sigma / factor,
            intensity: g.intensity,
        }
    };
    [child(), child()]
}

/// One density-control event. Returns the report and, for each Gaussian in
/// the new list, which old Gaussian it descends from.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    cfg: &DensityConfig,
    rng: &mut impl Rng,
) -> (DensityReport, Vec<Lineage>) {
    let n = cloud.len();
    debug_assert_eq!(cloud.grad_accum.len(), n);
    let split_above = cloud.extent / 3.0;
    let max_sigma = cfg.max_sigma_for(cloud.extent);

    let keep = |g: &Gaussian| g.intensity >= cfg.min_intensity && g.sigma <= max_sigma;
    // Gaussians about to be pruned free their slots under the cap.
    let survivors = cloud.gaussians.iter().filter(|g| keep(g)).count();
    let mut candidates: Vec<(usize, f64)> = (0..n)
        .filter(|&i| keep(&cloud.gaussians[i]))
        .map(|i| (i, cloud.grad_accum.mean_norm(i)))
        .filter(|&(_, g)| g > cfg.grad_threshold)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    candidates.truncate(cfg.max_gaussians.saturating_sub(survivors));
    let mut selected = vec![false; n];
    for &(i, _) in &candidates {
        selected[i] = true;
    }

    let mut report = DensityReport::default();
    let mut next: Vec<(Gaussian, Lineage)> = Vec::with_capacity(n + candidates.len());
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if !selected[i] {
            next.push((*g, Lineage::Kept(i)));
        } else if g.sigma <= split_above {
            report.cloned += 1;
            for c in clone_gaussian(g, cloud.grad_accum.vec_sum[i]) {
                next.push((c, Lineage::Cloned(i)));
            }
        } else {
            report.split += 1;
            for mut c in split_gaussian(g, cfg.split_sigma_factor, rng) {
                if cfg.split_preserves_mass {
                    c.intensity *= 0.5 * cfg.split_sigma_factor.powi(3);
                }
                next.push((c, Lineage::Split(i)));
            }
        }
    }

    let before = next.len();
    let mut kept: Vec<(Gaussian, Lineage)> = next.iter().copied().filter(|(g, _)| keep(g)).collect();
    if kept.is_empty() {
        // never leave the cloud empty
        if let Some(best) = next
            .iter()
            .copied()
            .max_by(|a, b| a.0.intensity.total_cmp(&b.0.intensity))
        {
            log::warn!("density control would prune every gaussian; keeping the brightest");
            kept.push(best);
        }
    }
    report.pruned = before - kept.len();
    report.n_after = kept.len();

    let (gaussians, lineage): (Vec<_>, Vec<_>) = kept.into_iter().unzip();
    cloud.gaussians = gaussians;
    cloud.reset_grad_accum();
    (report, lineage)
}

/// Post-event invariants: intensity floor, sigma ceiling, size cap, aligned
/// and zeroed gradient statistics.
pub fn check_invariants(cloud: &GaussianCloud, cfg: &DensityConfig) -> std::result::Result<(), String> {
    let max_sigma = cfg.max_sigma_for(cloud.extent);
    if cloud.len() > cfg.max_gaussians {
        return Err(format!("{} gaussians exceed cap {}", cloud.len(), cfg.max_gaussians));
    }
    if cloud.grad_accum.len() != cloud.len()
        || cloud.grad_accum.vec_sum.len() != cloud.len()
        || cloud.grad_accum.count.len() != cloud.len()
    {
        return Err("gradient statistics misaligned".into());
    }
    if cloud.grad_accum.count.iter().any(|&c| c != 0) {
        return Err("gradient statistics not reset".into());
    }
    for (i, g) in cloud.gaussians.iter().enumerate() {
        if g.intensity < cfg.min_intensity {
            return Err(format!("gaussian {i} intensity {} below floor", g.intensity));
        }
        if g.sigma > max_sigma {
            return Err(format!("gaussian {i} sigma {} above ceiling", g.sigma));
        }
    }
    Ok(())
}
