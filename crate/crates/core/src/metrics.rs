//! PSNR and slice-wise SSIM between volumes.

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    /// `(psnr, ssim)` per z slice, when requested.
    pub per_slice: Option<Vec<(f64, f64)>>,
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn psnr_from_mse(mse: f64, data_range: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (data_range * data_range / mse).log10()
    }
}

/// `10 log10(range^2 / MSE)`; `+inf` for identical inputs.
pub fn psnr(a: &VoxelGrid, b: &VoxelGrid, data_range: f64) -> Result<f64> {
    a.check_same_shape(b)?;
    if !(data_range > 0.0) {
        return Err(Error::config("data_range", "must be > 0"));
    }
    Ok(psnr_from_mse(mse(&a.data, &b.data), data_range))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable "valid" filtering of a `nx x ny` image.
fn filter_valid(img: &[f64], nx: usize, ny: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ox = nx - SSIM_WINDOW + 1;
    let oy = ny - SSIM_WINDOW + 1;
    let mut tmp = vec![0.0; ox * ny];
    for y in 0..ny {
        for x in 0..ox {
            let mut s = 0.0;
            for (k, wk) in w.iter().enumerate() {
                s += wk * img[y * nx + x + k];
            }
            tmp[y * ox + x] = s;
        }
    }
    let mut out = vec![0.0; ox * oy];
    for y in 0..oy {
        for x in 0..ox {
            let mut s = 0.0;
            for (k, wk) in w.iter().enumerate() {
                s += wk * tmp[(y + k) * ox + x];
            }
            out[y * ox + x] = s;
        }
    }
    out
}

fn ssim_slice(a: &[f64], b: &[f64], nx: usize, ny: usize, data_range: f64) -> f64 {
    let w = gaussian_window();
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, nx, ny, &w);
    let mu_b = filter_valid(b, nx, ny, &w);
    let s_aa = filter_valid(&aa, nx, ny, &w);
    let s_bb = filter_valid(&bb, nx, ny, &w);
    let s_ab = filter_valid(&ab, nx, ny, &w);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = s_aa[i] - ma * ma;
        let vb = s_bb[i] - mb * mb;
        let cov = s_ab[i] - ma * mb;
        let num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        let den = (ma * ma + mb * mb + c1) * (va + vb + c2);
        total += num / den;
    }
    total / mu_a.len() as f64
}

fn ssim_per_slice(a: &VoxelGrid, b: &VoxelGrid, data_range: f64) -> Result<Vec<f64>> {
    a.check_same_shape(b)?;
    let [nx, ny, _] = a.dims();
    if nx < SSIM_WINDOW || ny < SSIM_WINDOW {
        return Err(Error::shape(
            format!("slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
            format!("{nx}x{ny}"),
        ));
    }
    if !(data_range > 0.0) {
        return Err(Error::config("data_range", "must be > 0"));
    }
    let n = nx * ny;
    Ok(a.data
        .par_chunks(n)
        .zip(b.data.par_chunks(n))
        .map(|(sa, sb)| ssim_slice(sa, sb, nx, ny, data_range))
        .collect())
}

/// Mean 2D SSIM over z slices (11x11 Gaussian window, sigma 1.5, valid region).
pub fn ssim(a: &VoxelGrid, b: &VoxelGrid, data_range: f64) -> Result<f64> {
    let slices = ssim_per_slice(a, b, data_range)?;
    Ok(slices.iter().sum::<f64>() / slices.len() as f64)
}

pub fn report(a: &VoxelGrid, b: &VoxelGrid, data_range: f64, per_slice: bool) -> Result<MetricReport> {
    let psnr_v = psnr(a, b, data_range)?;
    let slices = ssim_per_slice(a, b, data_range)?;
    let ssim_v = slices.iter().sum::<f64>() / slices.len() as f64;
    let per_slice = per_slice.then(|| {
        let n = a.dims()[0] * a.dims()[1];
        a.data
            .chunks(n)
            .zip(b.data.chunks(n))
            .zip(&slices)
            .map(|((sa, sb), &s)| (psnr_from_mse(mse(sa, sb), data_range), s))
            .collect()
    });
    Ok(MetricReport {
        psnr: psnr_v,
        ssim: ssim_v,
        per_slice,
    })
}
