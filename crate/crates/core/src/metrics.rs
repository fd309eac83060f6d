//! PSNR, SSIM, and L1 on [0,1]-range frames.

use crate::error::{Error, Result};
use crate::imaging::Frame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
}

fn check_shape(a: &Frame, b: &Frame) -> Result<()> {
    if !a.same_shape(b) {
        return Err(Error::DimensionMismatch(format!(
            "metric inputs {}x{}x{} vs {}x{}x{}",
            a.width(),
            a.height(),
            a.channels(),
            b.width(),
            b.height(),
            b.channels()
        )));
    }
    Ok(())
}

/// PSNR in dB over the joint MSE of all channels, peak 1.0. Returns
/// `f64::INFINITY` for identical frames.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check_shape(a, b)?;
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        Ok(f64::INFINITY)
    } else {
        Ok(10.0 * (1.0 / mse).log10())
    }
}

/// Mean absolute error over all samples.
pub fn l1_loss(a: &Frame, b: &Frame) -> Result<f64> {
    check_shape(a, b)?;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / a.data().len() as f64)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let dx = x as f64 - 5.0;
            let dy = y as f64 - 5.0;
            let g = (-(dx * dx + dy * dy) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = g;
            sum += g;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Single-scale SSIM: 11x11 Gaussian window (sigma 1.5), C1=0.01^2,
/// C2=0.03^2, computed per channel over valid window positions, then
/// averaged across channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_shape(a, b)?;
    let (w, h, c) = (a.width(), a.height(), a.channels());
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidParam(format!(
            "ssim needs min dimension {SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let win = gaussian_window();
    let mut channel_sum = 0.0;
    for ch in 0..c {
        let mut acc = 0.0;
        let mut count = 0usize;
        for wy in 0..=h - SSIM_WINDOW {
            for wx in 0..=w - SSIM_WINDOW {
                let (mut mu_a, mut mu_b) = (0.0, 0.0);
                let (mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0);
                for ky in 0..SSIM_WINDOW {
                    for kx in 0..SSIM_WINDOW {
                        let g = win[ky * SSIM_WINDOW + kx];
                        let pa = a.get(wx + kx, wy + ky, ch);
                        let pb = b.get(wx + kx, wy + ky, ch);
                        mu_a += g * pa;
                        mu_b += g * pb;
                        aa += g * pa * pa;
                        bb += g * pb * pb;
                        ab += g * pa * pb;
                    }
                }
                let var_a = aa - mu_a * mu_a;
                let var_b = bb - mu_b * mu_b;
                let cov = ab - mu_a * mu_b;
                let s = ((2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2));
                acc += s;
                count += 1;
            }
        }
        channel_sum += acc / count as f64;
    }
    Ok(channel_sum / c as f64)
}

pub fn report(a: &Frame, b: &Frame) -> Result<MetricReport> {
    Ok(MetricReport {
        psnr: psnr(a, b)?,
        ssim: ssim(a, b)?,
        l1: l1_loss(a, b)?,
    })
}
