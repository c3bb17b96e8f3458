//! Adam-driven training loops for the Gaussian cloud and for the plain voxel
//! baseline.
//!
//! The loss is the sum of squared residuals between the forward projection of
//! the rasterized volume and the measured stack. Its voxel-space gradient is
//! `2 A^T (A V - P)`, which is pushed through the rasterizer to get per-Gaussian
//! gradients. Sigma is optimized as `ln sigma`.

use std::path::PathBuf;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::density::{check_invariants, densify_and_prune, DensityConfig, DensityReport, Lineage};
use crate::error::{Error, Result};
use crate::gaussian::{rasterize, rasterize_with_grads, GaussianCloud, GaussianGrad};
use crate::geometry::{GridSpec, ProjectionStack, VoxelGrid};
use crate::metrics;
use crate::projector::{back_project, forward_project};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub iterations: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_mu_start: f64,
    pub lr_mu_end: f64,
    /// Constant rate shared by `ln sigma` and intensity.
    pub lr_sigma_intensity: f64,
    pub epsilon: f64,
    /// Divide loss and gradient by the number of detector elements. Adam is
    /// invariant to a constant gradient scale, so the rates need no change;
    /// only `epsilon` becomes relatively larger.
    pub normalize_loss: bool,
    /// SSIM against the reference is logged every this many iterations.
    pub eval_every: usize,
    /// Write a cloud checkpoint every this many iterations.
    pub checkpoint_every: Option<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            iterations: 3000,
            beta1: 0.9,
            beta2: 0.999,
            lr_mu_start: 2e-4,
            lr_mu_end: 2e-6,
            lr_sigma_intensity: 0.05,
            epsilon: 1e-15,
            normalize_loss: false,
            eval_every: 100,
            checkpoint_every: None,
        }
    }
}

fn check_betas(beta1: f64, beta2: f64, epsilon: f64) -> Result<()> {
    if !(0.0..1.0).contains(&beta1) {
        return Err(Error::config("beta1", format!("must lie in [0, 1), got {beta1}")));
    }
    if !(0.0..1.0).contains(&beta2) {
        return Err(Error::config("beta2", format!("must lie in [0, 1), got {beta2}")));
    }
    if !(epsilon > 0.0) {
        return Err(Error::config("epsilon", "must be > 0"));
    }
    Ok(())
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        check_betas(self.beta1, self.beta2, self.epsilon)?;
        for (field, v) in [
            ("lr_mu_start", self.lr_mu_start),
            ("lr_mu_end", self.lr_mu_end),
            ("lr_sigma_intensity", self.lr_sigma_intensity),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::config(field, format!("must be > 0, got {v}")));
            }
        }
        if self.lr_mu_end > self.lr_mu_start {
            return Err(Error::config("lr_mu_end", "must not exceed lr_mu_start"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint_every", "must be >= 1"));
        }
        Ok(())
    }
}

/// Exponential interpolation from `lr_mu_start` at step 0 to `lr_mu_end` at
/// step `iterations`.
pub fn mu_lr_at(step: usize, cfg: &OptimConfig) -> f64 {
    if step == 0 || cfg.iterations == 0 {
        return cfg.lr_mu_start;
    }
    if step >= cfg.iterations {
        return cfg.lr_mu_end;
    }
    let t = step as f64 / cfg.iterations as f64;
    cfg.lr_mu_start * (cfg.lr_mu_end / cfg.lr_mu_start).powf(t)
}

/// Loss and `dL/dV` for the current cloud.
pub fn loss_and_voxel_adjoint(
    cloud: &GaussianCloud,
    measured: &ProjectionStack,
    spec: &GridSpec,
) -> Result<(f64, VoxelGrid)> {
    let volume = rasterize(cloud, spec);
    let (loss, adj, _) = volume_loss_and_adjoint(&volume, measured, false)?;
    Ok((loss, adj))
}

/// Loss, `dL/dV` and the residual stack for a voxel volume.
fn volume_loss_and_adjoint(
    volume: &VoxelGrid,
    measured: &ProjectionStack,
    normalize: bool,
) -> Result<(f64, VoxelGrid, ProjectionStack)> {
    let mut residual = forward_project(volume, &measured.geometry)?;
    residual.check_same_shape(measured)?;
    let scale = if normalize {
        1.0 / measured.data.len() as f64
    } else {
        1.0
    };
    let mut loss = 0.0;
    for (r, p) in residual.data.iter_mut().zip(&measured.data) {
        *r -= p;
        loss += *r * *r;
    }
    let mut adj = back_project(&residual, &volume.spec)?;
    for v in &mut adj.data {
        *v *= 2.0 * scale;
    }
    Ok((loss * scale, adj, residual))
}

/// First and second moments for one parameter group.
#[derive(Debug, Clone, Default, PartialEq)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Copy + Default> Moments<T> {
    fn zeros(n: usize) -> Self {
        Moments {
            m: vec![T::default(); n],
            v: vec![T::default(); n],
        }
    }

    fn remap(&self, lineage: &[Lineage]) -> Self {
        let mut out = Moments::zeros(lineage.len());
        for (j, l) in lineage.iter().enumerate() {
            match *l {
                Lineage::Kept(i) | Lineage::Cloned(i) => {
                    out.m[j] = self.m[i];
                    out.v[j] = self.v[i];
                }
                Lineage::Split(_) => {}
            }
        }
        out
    }
}

/// Adam state for the three Gaussian parameter groups: `mu`, `ln sigma`, `I`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    mu: Moments<[f64; 3]>,
    log_sigma: Moments<f64>,
    intensity: Moments<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupRates {
    pub mu: f64,
    pub log_sigma: f64,
    pub intensity: f64,
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn adam_update(m: &mut f64, v: &mut f64, g: f64, b1: f64, b2: f64, c1: f64, c2: f64, eps: f64) -> f64 {
    *m = b1 * *m + (1.0 - b1) * g;
    *v = b2 * *v + (1.0 - b2) * g * g;
    let mh = *m / c1;
    let vh = *v / c2;
    mh / (vh.sqrt() + eps)
}

impl GaussianAdam {
    pub fn new(n: usize, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        GaussianAdam {
            beta1,
            beta2,
            epsilon,
            step: 0,
            mu: Moments::zeros(n),
            log_sigma: Moments::zeros(n),
            intensity: Moments::zeros(n),
        }
    }

    pub fn len(&self) -> usize {
        self.log_sigma.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Reindexes the moment buffers after density control. Kept and cloned
    /// Gaussians inherit their parent's moments, split children start at zero.
    pub fn remap(&mut self, lineage: &[Lineage]) {
        self.mu = self.mu.remap(lineage);
        self.log_sigma = self.log_sigma.remap(lineage);
        self.intensity = self.intensity.remap(lineage);
    }

    /// One bias-corrected Adam step. `grads` are with respect to `sigma`; the
    /// chain rule to `ln sigma` is applied here. Intensities are clamped to be
    /// nonnegative afterwards.
    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &[GaussianGrad], lr: GroupRates) -> Result<()> {
        let n = cloud.len();
        if grads.len() != n || self.len() != n {
            return Err(Error::shape(
                format!("{n} gradients and optimizer slots"),
                format!("{} gradients, {} slots", grads.len(), self.len()),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.epsilon);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (i, (g, gr)) in cloud.gaussians.iter_mut().zip(grads).enumerate() {
            for a in 0..3 {
                let u = adam_update(&mut self.mu.m[i][a], &mut self.mu.v[i][a], gr.mu[a], b1, b2, c1, c2, eps);
                g.mu[a] -= lr.mu * u;
            }
            let g_log = gr.sigma * g.sigma;
            let u = adam_update(&mut self.log_sigma.m[i], &mut self.log_sigma.v[i], g_log, b1, b2, c1, c2, eps);
            g.sigma *= (-lr.log_sigma * u).exp();
            let u = adam_update(&mut self.intensity.m[i], &mut self.intensity.v[i], gr.intensity, b1, b2, c1, c2, eps);
            g.intensity = (g.intensity - lr.intensity * u).max(0.0);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingRecord {
    pub iteration: usize,
    /// Loss of the parameters entering this iteration.
    pub loss: f64,
    pub num_gaussians: usize,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
    pub wall_ms: f64,
    /// Set when a density-control event ran at the end of this iteration.
    pub density: Option<DensityReport>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainingLog {
    pub records: Vec<TrainingRecord>,
}

impl TrainingLog {
    pub const CSV_HEADER: &'static str =
        "iteration,loss,num_gaussians,psnr,ssim,wall_ms,cloned,split,pruned,n_after";

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let d = r.density.map(|d| {
                format!("{},{},{},{}", d.cloned, d.split, d.pruned, d.n_after)
            });
            s.push_str(&format!(
                "{},{:.9e},{},{},{},{:.1},{}\n",
                r.iteration,
                r.loss,
                r.num_gaussians,
                opt(r.psnr),
                opt(r.ssim),
                r.wall_ms,
                d.unwrap_or_else(|| ",,,".into())
            ));
        }
        s
    }

    pub fn density_events(&self) -> impl Iterator<Item = (usize, DensityReport)> + '_ {
        self.records
            .iter()
            .filter_map(|r| r.density.map(|d| (r.iteration, d)))
    }
}

/// Optional inputs to a training run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions<'a> {
    /// Ground truth for PSNR/SSIM logging.
    pub reference: Option<&'a VoxelGrid>,
    /// Directory for periodic checkpoints when `checkpoint_every` is set.
    pub checkpoint_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct GaussianResult {
    pub cloud: GaussianCloud,
    pub volume: VoxelGrid,
    pub log: TrainingLog,
}

/// SSIM is evaluated on the first and last iteration and every `every` steps.
fn eval_due(it: usize, iterations: usize, every: usize) -> bool {
    it == 1 || it == iterations || it.is_multiple_of(every)
}

fn eval_reference(
    volume: &VoxelGrid,
    reference: Option<&VoxelGrid>,
    with_ssim: bool,
) -> Result<(Option<f64>, Option<f64>)> {
    let Some(r) = reference else {
        return Ok((None, None));
    };
    let psnr = metrics::psnr(volume, r, 1.0)?;
    let ssim = if with_ssim {
        Some(metrics::ssim(volume, r, 1.0)?)
    } else {
        None
    };
    Ok((Some(psnr), ssim))
}

/// Fits the cloud to the measured projections.
pub fn reconstruct_gaussian(
    measured: &ProjectionStack,
    spec: &GridSpec,
    init: GaussianCloud,
    optim: &OptimConfig,
    density: &DensityConfig,
    opts: &RunOptions<'_>,
    rng: &mut impl Rng,
) -> Result<GaussianResult> {
    optim.validate()?;
    density.validate()?;
    let mut cloud = init;
    if cloud.grad_accum.len() != cloud.len() {
        cloud.reset_grad_accum();
    }
    let mut adam = GaussianAdam::new(cloud.len(), optim.beta1, optim.beta2, optim.epsilon);
    let mut log = TrainingLog::default();
    let start = Instant::now();

    for it in 1..=optim.iterations {
        let volume = rasterize(&cloud, spec);
        let (loss, adj, _) = volume_loss_and_adjoint(&volume, measured, optim.normalize_loss)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        let (psnr, ssim) = eval_reference(&volume, opts.reference, eval_due(it, optim.iterations, optim.eval_every))?;
        let grads = rasterize_with_grads(&cloud, spec, &adj)?;
        cloud.grad_accum.add(&grads);
        let rates = GroupRates {
            mu: mu_lr_at(it - 1, optim),
            log_sigma: optim.lr_sigma_intensity,
            intensity: optim.lr_sigma_intensity,
        };
        adam.step(&mut cloud, &grads, rates)?;

        let mut event = None;
        if density.fires_at(it) {
            let (report, lineage) = densify_and_prune(&mut cloud, density, rng);
            adam.remap(&lineage);
            if cfg!(debug_assertions) {
                if let Err(msg) = check_invariants(&cloud, density) {
                    panic!("density control invariant violated after iteration {it}: {msg}");
                }
            }
            log::debug!("iteration {it}: density control {report:?}");
            event = Some(report);
        }
        log.records.push(TrainingRecord {
            iteration: it,
            loss,
            num_gaussians: cloud.len(),
            psnr,
            ssim,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            density: event,
        });
        if let (Some(k), Some(dir)) = (optim.checkpoint_every, opts.checkpoint_dir.as_ref()) {
            if it % k == 0 {
                crate::io::save_checkpoint(&cloud, it, &dir.join(format!("checkpoint_{it:06}.raw")))?;
            }
        }
        if it % 100 == 0 {
            log::info!("iteration {it}: loss {loss:.6e}, {} gaussians", cloud.len());
        }
    }

    let volume = rasterize(&cloud, spec);
    Ok(GaussianResult {
        cloud,
        volume,
        log,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IterativeConfig {
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub normalize_loss: bool,
    pub eval_every: usize,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        IterativeConfig {
            iterations: 300,
            lr_start: 0.01,
            lr_end: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-15,
            normalize_loss: false,
            eval_every: 50,
        }
    }
}

impl IterativeConfig {
    pub fn validate(&self) -> Result<()> {
        check_betas(self.beta1, self.beta2, self.epsilon)?;
        if !(self.lr_start > 0.0) || !(self.lr_end > 0.0) {
            return Err(Error::config("lr_start", "learning rates must be > 0"));
        }
        if self.lr_end > self.lr_start {
            return Err(Error::config("lr_end", "must not exceed lr_start"));
        }
        if self.eval_every == 0 {
            return Err(Error::config("eval_every", "must be >= 1"));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize) -> f64 {
        if self.iterations == 0 {
            return self.lr_start;
        }
        let t = step.min(self.iterations) as f64 / self.iterations as f64;
        self.lr_start * (self.lr_end / self.lr_start).powf(t)
    }
}

/// Adam on the voxel values themselves, starting from zero, with a
/// nonnegativity clamp after every step.
pub fn reconstruct_voxel_iterative(
    measured: &ProjectionStack,
    spec: &GridSpec,
    cfg: &IterativeConfig,
    reference: Option<&VoxelGrid>,
) -> Result<(VoxelGrid, TrainingLog)> {
    cfg.validate()?;
    spec.validate()?;
    let mut volume = spec.zeros();
    let mut m = vec![0.0; spec.len()];
    let mut v = vec![0.0; spec.len()];
    let mut log = TrainingLog::default();
    let start = Instant::now();
    for it in 1..=cfg.iterations {
        let (loss, adj, _) = volume_loss_and_adjoint(&volume, measured, cfg.normalize_loss)?;
        if !loss.is_finite() {
            return Err(Error::Diverged { iteration: it });
        }
        let (psnr, ssim) = eval_reference(&volume, reference, eval_due(it, cfg.iterations, cfg.eval_every))?;
        let t = it as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        let lr = cfg.lr_at(it - 1);
        for i in 0..volume.data.len() {
            let u = adam_update(&mut m[i], &mut v[i], adj.data[i], cfg.beta1, cfg.beta2, c1, c2, cfg.epsilon);
            volume.data[i] = (volume.data[i] - lr * u).max(0.0);
        }
        log.records.push(TrainingRecord {
            iteration: it,
            loss,
            num_gaussians: 0,
            psnr,
            ssim,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
            density: None,
        });
        if it % 50 == 0 {
            log::info!("voxel iteration {it}: loss {loss:.6e}");
        }
    }
    Ok((volume, log))
}
