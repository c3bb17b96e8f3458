//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Pass criterion numbers as arguments to run a subset. Set
//! `GAUSSCT_RECORD_PILOT=1` to rewrite the recorded reference PSNRs used by
//! the ordering check.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use gaussct::density::check_invariants;
use gaussct::gaussian::{eval_gaussian, rasterize, rasterize_with_grads, Gaussian, GaussianCloud};
use gaussct::geometry::{make_semicircle_geometry, GridSpec, ProjectionStack, VoxelGrid};
use gaussct::initializer::{init_from_fbp, sigma_from_neighbors, threshold_fbp, InitConfig};
use gaussct::optim::{loss_and_voxel_adjoint, mu_lr_at, OptimConfig};
use gaussct::projector::{back_project, forward_project};
use gaussct_cli::commands::{self, Method, Sweep};
use gaussct_cli::config::{self, ExperimentConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PILOT_FILE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/data/table1_pilot.json");
const PILOT_TOLERANCE_DB: f64 = 0.5;

type Check = fn() -> Result<(bool, String)>;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let wanted: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, Check); 9] = [
        (1, "adjoint identity", adjoint),
        (2, "end-to-end gradients", gradients),
        (3, "rasterization oracle", raster_oracle),
        (4, "method ordering", table_ordering),
        (5, "density control benefit", density_benefit),
        (6, "initializer formulas", init_formulas),
        (7, "mu learning-rate schedule", schedule),
        (8, "density control invariants", density_invariants),
        (9, "determinism", determinism),
    ];
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let outcome = match catch_unwind(check) {
            Ok(Ok(r)) => r,
            Ok(Err(e)) => (false, format!("error: {e:#}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panic: {msg}"))
            }
        };
        let secs = t.elapsed().as_secs_f64();
        let verdict = if outcome.0 { "PASS" } else { "FAIL" };
        println!("criterion {id} {name}: {verdict} ({secs:.1}s) {}", outcome.1);
        if !outcome.0 {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn experiment(out: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut all = vec![format!("output_dir={}", out.display())];
    all.extend_from_slice(overrides);
    config::load(None, &all)
}

fn strings(s: &[&str]) -> Vec<String> {
    s.iter().map(|x| x.to_string()).collect()
}

fn adjoint() -> Result<(bool, String)> {
    let spec = GridSpec::unit_cube([32, 32, 32])?;
    let geom = make_semicircle_geometry(8, [32, 48], 2.0, 2.0, [0.085, 0.085])?;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let x = VoxelGrid::from_data(spec, (0..spec.len()).map(|_| rng.random()).collect())?;
        let y_data: Vec<f64> = (0..geom.num_elements())
            .map(|_| rng.random::<f64>() - 0.5)
            .collect();
        let y = ProjectionStack::from_data(geom.clone(), y_data)?;
        let ax = forward_project(&x, &geom)?;
        let aty = back_project(&y, &spec)?;
        let rel = (dot(&ax.data, &y.data) - dot(&x.data, &aty.data)).abs()
            / (dot(&ax.data, &ax.data).sqrt() * dot(&y.data, &y.data).sqrt());
        worst = worst.max(rel);
    }
    Ok((worst <= 1e-4, format!("worst relative gap {worst:.3e} over 20 pairs")))
}

/// Five Gaussians whose footprint faces stay clear of voxel centers, so the
/// truncated loss is smooth within the difference step.
fn smooth_instance(rng: &mut ChaCha8Rng, spec: &GridSpec, d: f64) -> Result<GaussianCloud> {
    loop {
        let gs: Vec<Gaussian> = (0..5)
            .map(|_| {
                let mu = [0.0; 3].map(|_: f64| rng.random_range(0.25..0.75));
                Gaussian::new(mu, rng.random_range(0.05..0.09), rng.random_range(0.2..0.8))
            })
            .collect();
        let clear = gs.iter().all(|g| {
            (0..3).all(|a| {
                (0..spec.dims[a]).all(|i| {
                    let c = spec.origin[a] + i as f64 * spec.spacing[a];
                    (c - (g.mu[a] - d)).abs() > 2e-3 && (c - (g.mu[a] + d)).abs() > 2e-3
                })
            })
        });
        if clear {
            return Ok(GaussianCloud::new(gs, d)?);
        }
    }
}

fn gradients() -> Result<(bool, String)> {
    let spec = GridSpec::unit_cube([8, 8, 8])?;
    let geom = make_semicircle_geometry(2, [8, 12], 2.0, 2.0, [0.35, 0.35])?;
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let d = 0.3;
    let target = smooth_instance(&mut rng, &spec, d)?;
    let measured = forward_project(&rasterize(&target, &spec), &geom)?;
    let cloud = smooth_instance(&mut rng, &spec, d)?;

    let (_, adj) = loss_and_voxel_adjoint(&cloud, &measured, &spec)?;
    let grads = rasterize_with_grads(&cloud, &spec, &adj)?;
    let loss = |c: &GaussianCloud| loss_and_voxel_adjoint(c, &measured, &spec).map(|r| r.0);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for (i, grad) in grads.iter().enumerate() {
        for p in 0..5 {
            let analytic = match p {
                0..=2 => grad.mu[p],
                3 => grad.sigma,
                _ => grad.intensity,
            };
            let shifted = |s: f64| {
                let mut c = cloud.clone();
                let g = &mut c.gaussians[i];
                match p {
                    0..=2 => g.mu[p] += s,
                    3 => g.sigma += s,
                    _ => g.intensity += s,
                }
                c
            };
            let fd = (loss(&shifted(h))? - loss(&shifted(-h))?) / (2.0 * h);
            let rel = (fd - analytic).abs() / fd.abs().max(analytic.abs()).max(1e-9);
            worst = worst.max(rel);
        }
    }
    Ok((worst <= 1e-3, format!("worst relative error {worst:.3e} over 25 parameters")))
}

fn raster_oracle() -> Result<(bool, String)> {
    let spec = GridSpec::unit_cube([8, 8, 8])?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let d = 0.12;
    let gs: Vec<Gaussian> = (0..50)
        .map(|_| {
            let mu = [0.0; 3].map(|_: f64| rng.random_range(0.0..1.0));
            Gaussian::new(mu, rng.random_range(0.01..d / 3.0), rng.random_range(0.1..1.0))
        })
        .collect();
    let cloud = GaussianCloud::new(gs.clone(), d)?;
    let fast = rasterize(&cloud, &spec);
    let tail = (-4.5f64).exp();
    let mut violations = 0;
    let mut worst_ratio: f64 = 0.0;
    for z in 0..8 {
        for y in 0..8 {
            for x in 0..8 {
                let p = spec.center(x, y, z);
                let exact: f64 = gs.iter().map(|g| eval_gaussian(g, p)).sum();
                let bound: f64 = gs
                    .iter()
                    .filter(|g| (0..3).any(|a| (p[a] - g.mu[a]).abs() > d))
                    .map(|g| g.intensity * tail)
                    .sum();
                let err = (fast.data[x + 8 * (y + 8 * z)] - exact).abs();
                if err > bound + 1e-12 {
                    violations += 1;
                }
                if bound > 0.0 {
                    worst_ratio = worst_ratio.max(err / bound);
                }
            }
        }
    }
    Ok((
        violations == 0,
        format!("{violations} voxels over bound, worst error/bound {worst_ratio:.3e}"),
    ))
}

/// 64^3 abdomen phantom, 20 views, 3% projection noise.
fn table_config(out: &Path) -> Result<ExperimentConfig> {
    let px = 4.0 / 96.0;
    let mut o = strings(&[
        "grid.dims=[64,64,64]",
        "geometry.num_views=20",
        "geometry.detector_shape=[64,96]",
        "noise.relative_std=0.03",
        "init.num_gaussians=15000",
        "optim.iterations=150",
        "optim.lr_mu_start=1e-3",
        "optim.lr_mu_end=1e-5",
        "optim.lr_sigma_intensity=0.01",
        "optim.eval_every=50",
        "density.enabled=false",
        "iterative.iterations=200",
        "iterative.lr_start=0.05",
        "iterative.lr_end=0.002",
        "iterative.eval_every=50",
    ]);
    o.push(format!("geometry.detector_pixel_size=[{px},{px}]"));
    experiment(out, &o)
}

fn table_ordering() -> Result<(bool, String)> {
    let dir = tempfile::tempdir()?;
    let cfg = table_config(dir.path())?;
    let truth = commands::ground_truth(&cfg)?;
    let proj = commands::simulate(&cfg, &truth)?;
    let mut psnr = BTreeMap::new();
    for m in [Method::Fbp, Method::Iterative, Method::Gaussian, Method::GaussianUniform] {
        let o = commands::run_method(&cfg, &proj, m, Some(&truth), None)?;
        psnr.insert(m.name().to_string(), o.metrics.context("metrics")?.psnr);
    }
    let p = |k: &str| psnr[k];
    let ordered = p("fbp") < p("iterative")
        && p("iterative") < p("gaussian")
        && p("gaussian-uniform") <= p("gaussian");

    if std::env::var_os("GAUSSCT_RECORD_PILOT").is_some() {
        fs::create_dir_all(Path::new(PILOT_FILE).parent().unwrap())?;
        fs::write(PILOT_FILE, serde_json::to_string_pretty(&psnr)? + "\n")?;
    }
    let pilot: BTreeMap<String, f64> = serde_json::from_str(
        &fs::read_to_string(PILOT_FILE).with_context(|| format!("reading {PILOT_FILE}"))?,
    )?;
    ensure!(pilot.len() == psnr.len(), "recorded pilot lists {} methods", pilot.len());
    let mut within = true;
    let mut parts = Vec::new();
    for (k, v) in &psnr {
        let rec = *pilot.get(k).with_context(|| format!("pilot has no {k}"))?;
        within &= (v - rec).abs() <= PILOT_TOLERANCE_DB;
        parts.push(format!("{k} {v:.2} (pilot {rec:.2})"));
    }
    Ok((
        ordered && within,
        format!("ordered={ordered} within_0.5dB={within}: {}", parts.join(", ")),
    ))
}

/// 32^3 noiseless sweep: density control from 1000 Gaussians, then a run
/// without it initialized at the final count.
fn density_config(out: &Path, chest: bool) -> Result<ExperimentConfig> {
    let px = 4.0 / 48.0;
    let mut o = strings(&[
        "grid.dims=[32,32,32]",
        "geometry.num_views=20",
        "geometry.detector_shape=[32,48]",
        "init.extent=0.1",
        "init.num_gaussians=1000",
        "optim.iterations=400",
        "optim.lr_mu_start=1e-3",
        "optim.lr_mu_end=1e-5",
        "optim.lr_sigma_intensity=0.01",
        "optim.eval_every=100",
        "density.start_iteration=100",
        "density.interval=100",
        "density.stop_iteration=350",
        "density.max_gaussians=8000",
        "ablation.density_counts=[1000]",
    ]);
    o.push(format!("geometry.detector_pixel_size=[{px},{px}]"));
    if chest {
        o.extend(strings(&[
            r#"source={"phantom":"chest"}"#,
            "init.k_sigma=0.25",
            "init.k_intensity=0.15",
        ]));
    }
    experiment(out, &o)
}

fn density_benefit() -> Result<(bool, String)> {
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, chest) in [("abdomen", false), ("chest", true)] {
        let dir = tempfile::tempdir()?;
        let cfg = density_config(dir.path(), chest)?;
        let truth = commands::ground_truth(&cfg)?;
        let proj = commands::simulate(&cfg, &truth)?;
        let rows = commands::run_ablation(&cfg, &proj, &truth, Sweep::DensityControl)?;
        ensure!(rows.len() == 2, "expected an on/off pair");
        let (on, off) = (&rows[0], &rows[1]);
        ensure!(on.final_gaussians == off.init_gaussians, "budgets differ");
        pass &= on.psnr >= off.psnr;
        parts.push(format!(
            "{name}: on {:.3} vs off {:.3} at {} gaussians",
            on.psnr, off.psnr, on.final_gaussians
        ));
    }
    Ok((pass, parts.join("; ")))
}

fn init_formulas() -> Result<(bool, String)> {
    let mut bad: Vec<String> = Vec::new();
    let mut check = |what: &str, ok: bool| {
        if !ok {
            bad.push(what.to_string());
        }
    };

    let spec = GridSpec::unit_cube([3, 1, 1])?;
    let mixed = VoxelGrid::from_data(spec, vec![0.02, 0.05, 0.06])?;
    check("strict threshold", threshold_fbp(&mixed, 0.05).data == [0.0, 0.0, 0.06]);
    let low = VoxelGrid::from_data(spec, vec![0.01, 0.05, 0.0])?;
    check("all below tau", threshold_fbp(&low, 0.05).data == [0.0; 3]);
    let pos = VoxelGrid::from_data(spec, vec![0.3, 1e-9, 0.7])?;
    check("tau zero identity", threshold_fbp(&pos, 0.0).data == pos.data);

    check("sigma with 10 neighbors", sigma_from_neighbors(0.12, 10, 1.0) == 0.012);
    check("isolated sigma", sigma_from_neighbors(0.12, 0, 1.0) == 0.12);
    check("sigma capped at d/3", sigma_from_neighbors(0.12, 0, 0.06) == 0.02);

    // 3x3x3 constant volume, radius reaching face neighbors only: corner,
    // edge, face and center voxels see 3, 4, 5 and 6 neighbors.
    let cube = GridSpec::unit_cube([3, 3, 3])?;
    let fbp = VoxelGrid::filled(cube, 0.5);
    let cfg = InitConfig {
        num_gaussians: 27,
        neighbor_radius: Some(0.34),
        extent: 0.6,
        ..InitConfig::abdomen()
    };
    let cloud = init_from_fbp(&fbp, &cfg, &mut ChaCha8Rng::seed_from_u64(6))?;
    check("every voxel is a center", cloud.len() == 27);
    for g in &cloud.gaussians {
        let border = g.mu.iter().filter(|&&c| (c - 0.5).abs() > 0.1).count();
        let expected = [0.02, 0.024, 0.03, 0.04][border];
        check("sigma from neighbor count", g.sigma == expected);
        check("intensity k_I * I_fbp", g.intensity == 0.15);
    }
    let pass = bad.is_empty();
    let detail = if pass {
        "threshold, sigma and intensity match hand values".to_string()
    } else {
        bad.dedup();
        format!("mismatches: {}", bad.join(", "))
    };
    Ok((pass, detail))
}

fn schedule() -> Result<(bool, String)> {
    let cfg = OptimConfig {
        iterations: 30_000,
        ..OptimConfig::default()
    };
    let ends = mu_lr_at(0, &cfg) == 2e-4 && mu_lr_at(cfg.iterations, &cfg) == 2e-6;
    let mut worst: f64 = 0.0;
    for k in 1..=10 {
        let step = k * cfg.iterations / 11;
        let t = step as f64 / cfg.iterations as f64;
        // log-linear: ln lr = (1 - t) ln lr0 + t ln lr1
        let expected = ((1.0 - t) * 2e-4f64.ln() + t * 2e-6f64.ln()).exp();
        worst = worst.max((mu_lr_at(step, &cfg) - expected).abs() / expected);
    }
    Ok((
        ends && worst <= 1e-12,
        format!("endpoints exact={ends}, worst interior relative error {worst:.3e}"),
    ))
}

fn density_invariants() -> Result<(bool, String)> {
    ensure!(
        cfg!(debug_assertions),
        "in-run invariant assertions need a build with debug assertions"
    );
    let dir = tempfile::tempdir()?;
    let px = 4.0 / 48.0;
    let mut o = strings(&[
        "grid.dims=[32,32,32]",
        "geometry.detector_shape=[32,48]",
        "init.extent=0.1",
        "init.num_gaussians=1000",
        "optim.iterations=200",
        "optim.lr_mu_start=1e-3",
        "optim.lr_mu_end=1e-5",
        "optim.lr_sigma_intensity=0.01",
        "optim.eval_every=200",
        "density.start_iteration=25",
        "density.interval=25",
        "density.grad_threshold=5e-3",
        "density.max_gaussians=1400",
    ]);
    o.push(format!("geometry.detector_pixel_size=[{px},{px}]"));
    let cfg = experiment(dir.path(), &o)?;
    let truth = commands::ground_truth(&cfg)?;
    let proj = commands::simulate(&cfg, &truth)?;
    let run = catch_unwind(AssertUnwindSafe(|| {
        commands::run_method(&cfg, &proj, Method::Gaussian, Some(&truth), None)
    }));
    let outcome = match run {
        Ok(r) => r?,
        Err(_) => return Ok((false, "invariant assertion fired during the run".into())),
    };
    let cloud = outcome.cloud.context("gaussian run returns a cloud")?;
    let log = outcome.log.context("gaussian run returns a log")?;
    let events: Vec<_> = log.density_events().collect();
    let scheduled = (1..=cfg.optim.iterations)
        .filter(|&i| cfg.density.fires_at(i))
        .count();
    let final_ok = check_invariants(&cloud, &cfg.density);
    let cap_hit = events.iter().any(|(_, r)| r.n_after == cfg.density.max_gaussians);
    let touched = events.iter().any(|(_, r)| r.cloned + r.split > 0)
        && events.iter().any(|(_, r)| r.pruned > 0);
    Ok((
        events.len() == scheduled && cap_hit && touched && final_ok.is_ok(),
        format!(
            "{}/{scheduled} events, cap reached={cap_hit}, densified and pruned={touched}, final check {:?}",
            events.len(),
            final_ok
        ),
    ))
}

fn determinism() -> Result<(bool, String)> {
    let run = |dir: &Path| -> Result<(Vec<u8>, PathBuf)> {
        let px = 4.0 / 48.0;
        let mut o = strings(&[
            "grid.dims=[32,32,32]",
            "geometry.detector_shape=[32,48]",
            "noise.relative_std=0.03",
            "init.extent=0.1",
            "init.num_gaussians=1000",
            "optim.iterations=120",
            "optim.eval_every=40",
            "density.start_iteration=40",
            "density.interval=40",
            "seed=7",
        ]);
        o.push(format!("geometry.detector_pixel_size=[{px},{px}]"));
        let cfg = experiment(dir, &o)?;
        commands::cmd_simulate(&cfg)?;
        commands::cmd_reconstruct(&cfg, Method::Gaussian)?;
        let path = dir.join(Method::Gaussian.metrics_file());
        Ok((fs::read(&path)?, path))
    };
    let a = tempfile::tempdir()?;
    let b = tempfile::tempdir()?;
    let (first, _) = run(a.path())?;
    let (second, _) = run(b.path())?;
    let same = first == second;
    Ok((
        same && !first.is_empty(),
        format!(
            "metrics csv {} ({} bytes)",
            if same { "identical" } else { "differs" },
            first.len()
        ),
    ))
}
