//! Image quality metrics: PSNR against the reference peak and Gaussian
//! window SSIM.

use ndarray::Array2;

use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub psnr: f64,
    pub ssim: f64,
}

/// `10 log10(max(ref)^2 / mse)`; identical images give `+inf`.
pub fn psnr(reference: &Array2<f64>, test: &Array2<f64>) -> Result<f64> {
    if reference.dim() != test.dim() {
        return Err(Error::shape(reference.dim(), test.dim()));
    }
    let peak = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if peak.is_nan() || peak <= 0.0 {
        return Err(Error::param("PSNR needs a reference with a positive maximum"));
    }
    let mse = reference
        .iter()
        .zip(test.iter())
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - half).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let total: f64 = g.iter().sum();
    g.into_iter().map(|v| v / total).collect()
}

/// Dynamic range used for the stabilizing constants: `max - min` of the
/// reference, falling back to its largest magnitude (then 1) when the
/// reference is constant.
fn dynamic_range(reference: &Array2<f64>) -> f64 {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if hi > lo {
        return hi - lo;
    }
    let mag = hi.abs();
    if mag > 0.0 {
        mag
    } else {
        1.0
    }
}

/// Mean of the local SSIM map over all window positions fully inside the
/// image.
pub fn ssim(reference: &Array2<f64>, test: &Array2<f64>) -> Result<f64> {
    if reference.dim() != test.dim() {
        return Err(Error::shape(reference.dim(), test.dim()));
    }
    let (h, w) = reference.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::param(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} images, got {h}x{w}"
        )));
    }
    let l = dynamic_range(reference);
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let g = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..=h - SSIM_WINDOW {
        for j in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my) = (0.0, 0.0);
            for a in 0..SSIM_WINDOW {
                for b in 0..SSIM_WINDOW {
                    let wt = g[a] * g[b];
                    mx += wt * reference[[i + a, j + b]];
                    my += wt * test[[i + a, j + b]];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for a in 0..SSIM_WINDOW {
                for b in 0..SSIM_WINDOW {
                    let wt = g[a] * g[b];
                    let dx = reference[[i + a, j + b]] - mx;
                    let dy = test[[i + a, j + b]] - my;
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * dx * dy;
                }
            }
            let lum = (2.0 * mx * my + c1) / (mx * mx + my * my + c1);
            let cs = (2.0 * cxy + c2) / (vx + vy + c2);
            total += lum * cs;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

pub fn evaluate(reference: &Array2<f64>, test: &Array2<f64>) -> Result<MetricsReport> {
    Ok(MetricsReport {
        psnr: psnr(reference, test)?,
        ssim: ssim(reference, test)?,
    })
}
