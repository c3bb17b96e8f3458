//! Subcommand implementations. Every command reads and writes fixed file
//! names under the configured output directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use gaussct::density::DensityConfig;
use gaussct::gaussian::GaussianCloud;
use gaussct::geometry::{GridSpec, ProjectionStack, VoxelGrid};
use gaussct::initializer::{init_from_fbp, init_uniform};
use gaussct::io::{self, Axis};
use gaussct::metrics::{self, MetricReport};
use gaussct::optim::{reconstruct_gaussian, reconstruct_voxel_iterative, RunOptions, TrainingLog};
use gaussct::phantom::{render_ellipsoid_phantom, render_preset};
use gaussct::projector::{fbp_reconstruct, forward_project};
use gaussct::Error;

use crate::config::{ExperimentConfig, InitMethod, SourceConfig};

pub const PROJECTIONS: &str = "projections.raw";
pub const GROUND_TRUTH: &str = "ground_truth.raw";
pub const CONFIG_COPY: &str = "config.json";

/// Intensities are normalized to `[0, 1]`.
pub const DATA_RANGE: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Fbp,
    Iterative,
    Gaussian,
    GaussianUniform,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Fbp => "fbp",
            Method::Iterative => "iterative",
            Method::Gaussian => "gaussian",
            Method::GaussianUniform => "gaussian-uniform",
        }
    }

    pub fn recon_file(self) -> String {
        format!("recon_{}.raw", self.name())
    }

    pub fn metrics_file(self) -> String {
        format!("metrics_{}.csv", self.name())
    }

    pub fn log_file(self) -> String {
        format!("train_log_{}.csv", self.name())
    }

    pub fn slices_dir(self) -> String {
        format!("slices_{}", self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Sweep {
    GaussianCount,
    DensityControl,
}

impl Sweep {
    pub fn name(self) -> &'static str {
        match self {
            Sweep::GaussianCount => "gaussian-count",
            Sweep::DensityControl => "density-control",
        }
    }

    pub fn csv_file(self) -> String {
        format!("ablation_{}.csv", self.name())
    }
}

/// Renders or loads the ground-truth volume named by the config.
pub fn ground_truth(cfg: &ExperimentConfig) -> Result<VoxelGrid> {
    let spec = cfg.grid.spec()?;
    let source = cfg
        .source
        .as_ref()
        .ok_or_else(|| Error::config("source", "missing"))?;
    Ok(match source {
        SourceConfig::Phantom(p) => render_preset(*p, &spec),
        SourceConfig::Ellipsoids(es) => render_ellipsoid_phantom(es, &spec)?,
        SourceConfig::Volume(path) => {
            let v = io::load_volume(path)?;
            if v.spec.dims != spec.dims {
                return Err(Error::shape(format!("grid {:?}", spec.dims), format!("{:?}", v.spec.dims)).into());
            }
            v
        }
    })
}

/// Forward projects the ground truth and applies the configured noise.
pub fn simulate(cfg: &ExperimentConfig, truth: &VoxelGrid) -> Result<ProjectionStack> {
    let geom = cfg.geometry.build()?;
    let mut proj = forward_project(truth, &geom)?;
    let std = cfg.noise.relative_std * proj.data.iter().fold(0.0f64, |m, v| m.max(*v));
    if std > 0.0 {
        // separate stream from the reconstruction seed
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x006e_6f69_7365);
        for v in &mut proj.data {
            let z: f64 = rng.sample(StandardNormal);
            *v += std * z;
        }
    }
    Ok(proj)
}

pub struct SimulateOutput {
    pub projections: PathBuf,
    pub ground_truth: PathBuf,
}

pub fn cmd_simulate(cfg: &ExperimentConfig) -> Result<SimulateOutput> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let truth = ground_truth(cfg)?;
    let proj = simulate(cfg, &truth)?;
    let projections = out.join(PROJECTIONS);
    let gt = out.join(GROUND_TRUTH);
    io::save_projections(&proj, &projections)?;
    io::save_volume(&truth, &gt)?;
    fs::write(out.join(CONFIG_COPY), serde_json::to_string_pretty(cfg)?)?;
    log::info!(
        "wrote {} views of {}x{} to {}",
        proj.geometry.num_views(),
        proj.geometry.rows(),
        proj.geometry.cols(),
        projections.display()
    );
    Ok(SimulateOutput {
        projections,
        ground_truth: gt,
    })
}

#[derive(Debug, Clone)]
pub struct ReconOutcome {
    pub method: Method,
    pub volume: VoxelGrid,
    pub metrics: Option<MetricReport>,
    pub log: Option<TrainingLog>,
    pub cloud: Option<GaussianCloud>,
}

fn initial_cloud(
    cfg: &ExperimentConfig,
    fbp: &VoxelGrid,
    init: InitMethod,
    rng: &mut ChaCha8Rng,
) -> Result<GaussianCloud> {
    Ok(match init {
        InitMethod::Fbp => init_from_fbp(fbp, &cfg.init, rng)?,
        InitMethod::Uniform => init_uniform(fbp, &cfg.init, rng)?,
    })
}

/// Runs one reconstruction pipeline in memory.
pub fn run_method(
    cfg: &ExperimentConfig,
    proj: &ProjectionStack,
    method: Method,
    reference: Option<&VoxelGrid>,
    checkpoint_dir: Option<PathBuf>,
) -> Result<ReconOutcome> {
    let spec: GridSpec = cfg.grid.spec()?;
    let (volume, log, cloud) = match method {
        Method::Fbp => (fbp_reconstruct(proj, &spec, &cfg.fbp)?, None, None),
        Method::Iterative => {
            let (v, log) = reconstruct_voxel_iterative(proj, &spec, &cfg.iterative, reference)
                .context("iterative reconstruction")?;
            (v, Some(log), None)
        }
        Method::Gaussian | Method::GaussianUniform => {
            let init = if method == Method::GaussianUniform {
                InitMethod::Uniform
            } else {
                cfg.init_method
            };
            let fbp = fbp_reconstruct(proj, &spec, &cfg.fbp)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let cloud = initial_cloud(cfg, &fbp, init, &mut rng).context("initializing gaussians")?;
            log::info!("initialized {} gaussians ({init:?})", cloud.len());
            let opts = RunOptions {
                reference,
                checkpoint_dir,
            };
            let res = reconstruct_gaussian(proj, &spec, cloud, &cfg.optim, &cfg.density, &opts, &mut rng)
                .context("gaussian reconstruction")?;
            (res.volume, Some(res.log), Some(res.cloud))
        }
    };
    let metrics = reference
        .map(|r| metrics::report(&volume, r, DATA_RANGE, false))
        .transpose()?;
    Ok(ReconOutcome {
        method,
        volume,
        metrics,
        log,
        cloud,
    })
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

pub fn metrics_csv(label: &str, m: &MetricReport) -> String {
    format!("method,psnr,ssim\n{label},{},{}\n", fmt_metric(m.psnr), fmt_metric(m.ssim))
}

fn load_reference(out: &Path) -> Result<Option<VoxelGrid>> {
    let p = out.join(GROUND_TRUTH);
    if p.exists() {
        Ok(Some(io::load_volume(&p)?))
    } else {
        log::warn!("no {} in {}; skipping metrics", GROUND_TRUTH, out.display());
        Ok(None)
    }
}

pub fn cmd_reconstruct(cfg: &ExperimentConfig, method: Method) -> Result<ReconOutcome> {
    let out = &cfg.output_dir;
    let proj_path = out.join(PROJECTIONS);
    let proj = io::load_projections(&proj_path)
        .with_context(|| format!("loading {}; run `simulate` first", proj_path.display()))?;
    let reference = load_reference(out)?;
    let ckpt = cfg
        .optim
        .checkpoint_every
        .map(|_| out.join(format!("checkpoints_{}", method.name())));
    if let Some(dir) = &ckpt {
        fs::create_dir_all(dir)?;
    }
    let outcome = run_method(cfg, &proj, method, reference.as_ref(), ckpt)?;
    io::save_volume(&outcome.volume, &out.join(method.recon_file()))?;
    io::export_slices(&outcome.volume, &out.join(method.slices_dir()), Axis::Z)?;
    if let Some(m) = &outcome.metrics {
        fs::write(out.join(method.metrics_file()), metrics_csv(method.name(), m))?;
        println!("{}: psnr {} ssim {}", method.name(), fmt_metric(m.psnr), fmt_metric(m.ssim));
    }
    if let Some(log) = &outcome.log {
        fs::write(out.join(method.log_file()), log.to_csv())?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub sweep: &'static str,
    pub density_control: bool,
    pub init_gaussians: usize,
    pub final_gaussians: usize,
    pub psnr: f64,
    pub ssim: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("sweep,density_control,init_gaussians,final_gaussians,psnr,ssim\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            r.sweep,
            if r.density_control { "on" } else { "off" },
            r.init_gaussians,
            r.final_gaussians,
            fmt_metric(r.psnr),
            fmt_metric(r.ssim)
        );
    }
    s
}

fn gaussian_run(
    base: &ExperimentConfig,
    proj: &ProjectionStack,
    truth: &VoxelGrid,
    count: usize,
    density: bool,
) -> Result<(usize, MetricReport)> {
    let mut cfg = base.clone();
    cfg.init.num_gaussians = count;
    cfg.density = DensityConfig {
        enabled: density,
        max_gaussians: base.density.max_gaussians.max(count),
        ..base.density.clone()
    };
    let o = run_method(&cfg, proj, Method::Gaussian, Some(truth), None)?;
    let n = o.cloud.as_ref().map_or(0, |c| c.len());
    Ok((n, o.metrics.expect("reference supplied")))
}

/// Runs a sweep in memory and returns one row per run.
pub fn run_ablation(
    cfg: &ExperimentConfig,
    proj: &ProjectionStack,
    truth: &VoxelGrid,
    sweep: Sweep,
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    match sweep {
        Sweep::GaussianCount => {
            if cfg.ablation.gaussian_counts.is_empty() {
                return Err(Error::config("ablation.gaussian_counts", "sweep list is empty").into());
            }
            for &count in &cfg.ablation.gaussian_counts {
                let (n, m) = gaussian_run(cfg, proj, truth, count, false)?;
                log::info!("count {count}: psnr {:.3}", m.psnr);
                rows.push(AblationRow {
                    sweep: sweep.name(),
                    density_control: false,
                    init_gaussians: count,
                    final_gaussians: n,
                    psnr: m.psnr,
                    ssim: m.ssim,
                });
            }
        }
        Sweep::DensityControl => {
            if cfg.ablation.density_counts.is_empty() {
                return Err(Error::config("ablation.density_counts", "sweep list is empty").into());
            }
            for &count in &cfg.ablation.density_counts {
                let (n_on, on) = gaussian_run(cfg, proj, truth, count, true)?;
                // the off run starts with the budget the on run ended with
                let (n_off, off) = gaussian_run(cfg, proj, truth, n_on, false)?;
                log::info!("density {count}: on {:.3} ({n_on}), off {:.3} ({n_off})", on.psnr, off.psnr);
                rows.push(AblationRow {
                    sweep: sweep.name(),
                    density_control: true,
                    init_gaussians: count,
                    final_gaussians: n_on,
                    psnr: on.psnr,
                    ssim: on.ssim,
                });
                rows.push(AblationRow {
                    sweep: sweep.name(),
                    density_control: false,
                    init_gaussians: n_on,
                    final_gaussians: n_off,
                    psnr: off.psnr,
                    ssim: off.ssim,
                });
            }
        }
    }
    Ok(rows)
}

/// Simulates if needed, runs the sweep and writes `ablation_<sweep>.csv`.
pub fn cmd_ablate(cfg: &ExperimentConfig, sweep: Sweep) -> Result<Vec<AblationRow>> {
    let out = &cfg.output_dir;
    let proj_path = out.join(PROJECTIONS);
    if !proj_path.exists() {
        cmd_simulate(cfg)?;
    }
    let proj = io::load_projections(&proj_path)?;
    let Some(truth) = load_reference(out)? else {
        bail!("ablation needs {} in {}", GROUND_TRUTH, out.display());
    };
    let rows = run_ablation(cfg, &proj, &truth, sweep)?;
    fs::write(out.join(sweep.csv_file()), ablation_csv(&rows))?;
    Ok(rows)
}

pub fn cmd_metrics(a: &Path, b: &Path, out: Option<&Path>) -> Result<MetricReport> {
    let va = io::load_volume(a)?;
    let vb = io::load_volume(b)?;
    let report = metrics::report(&va, &vb, DATA_RANGE, false)?;
    println!("psnr {} ssim {}", fmt_metric(report.psnr), fmt_metric(report.ssim));
    if let Some(p) = out {
        let label = a.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
        fs::write(p, metrics_csv(label, &report))?;
    }
    Ok(report)
}

pub fn cmd_export_slices(volume: &Path, out: &Path, axis: Axis) -> Result<Vec<PathBuf>> {
    let v = io::load_volume(volume)?;
    let paths = io::export_slices(&v, out, axis)?;
    println!("wrote {} slices to {}", paths.len(), out.display());
    Ok(paths)
}
