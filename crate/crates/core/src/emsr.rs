//! Extended multiscale retinex, contrast enhancement and alpha blending.
//!
//! Surround filtering is done in the frequency domain. Each channel is
//! mirrored to a `2H × 2W` half-sample symmetric extension, so the circular
//! convolution computed by the FFT equals linear convolution over the
//! infinitely mirrored image. The Gaussian transfer function
//! `exp(-2π²σ²f²)` is evaluated directly at the DFT frequencies.
//!
//! Clipping follows the automated-MSRCR rule. The response is quantized into
//! bins of `bin_width` (truncation toward zero), and `Z` is the count of the
//! bin at response zero. Going outward from zero, the low and high clip
//! points are the nearest bins whose counts fall below `zero_bin_ratio · Z`.
//! The clipped response is then stretched to `[0, 1]`.

use std::collections::BTreeMap;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::synth::enhance_bright;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetinexConfig {
    pub scales: Vec<f64>,
    pub zero_bin_ratio: f64,
    pub epsilon: f64,
    pub bin_width: f64,
}

impl Default for RetinexConfig {
    fn default() -> Self {
        Self {
            scales: vec![5.0, 130.0, 255.0],
            zero_bin_ratio: 0.10,
            epsilon: 1e-6,
            bin_width: 0.01,
        }
    }
}

impl RetinexConfig {
    pub fn with_scales(scales: Vec<f64>) -> Self {
        Self {
            scales,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Config("retinex needs at least one scale".into()));
        }
        if self.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::Config("retinex scales must be positive".into()));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("retinex scales must be strictly increasing".into()));
        }
        if !(self.zero_bin_ratio > 0.0 && self.zero_bin_ratio < 1.0) {
            return Err(Error::Config("zero_bin_ratio must lie in (0, 1)".into()));
        }
        if !(self.epsilon > 0.0) || !(self.bin_width > 0.0) {
            return Err(Error::Config("epsilon and bin_width must be positive".into()));
        }
        Ok(())
    }
}

/// Parses `"5,130,255"`.
pub fn parse_scales(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("invalid retinex scale '{p}'")))
        })
        .collect()
}

fn mirror(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * n - 1 - i
    }
}

fn transfer(n: usize, sigma: f64) -> Vec<f64> {
    (0..n)
        .map(|k| {
            let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
            let f = k / n as f64;
            (-2.0 * std::f64::consts::PI.powi(2) * sigma * sigma * f * f).exp()
        })
        .collect()
}

/// Gaussian blur of a row-major plane through the FFT with mirrored boundaries.
pub fn gaussian_blur(plane: &[f64], height: usize, width: usize, sigma: f64) -> Vec<f64> {
    gaussian_blur_multi(plane, height, width, &[sigma])
        .pop()
        .unwrap_or_default()
}

/// One forward transform shared by several surround scales.
fn gaussian_blur_multi(plane: &[f64], height: usize, width: usize, sigmas: &[f64]) -> Vec<Vec<f64>> {
    let (nh, nw) = (2 * height, 2 * width);
    let mut planner = FftPlanner::<f64>::new();
    let row_fwd = planner.plan_fft_forward(nw);
    let col_fwd = planner.plan_fft_forward(nh);
    let row_inv = planner.plan_fft_inverse(nw);
    let col_inv = planner.plan_fft_inverse(nh);

    let mut spec: Vec<Complex<f64>> = Vec::with_capacity(nh * nw);
    for y in 0..nh {
        let sy = mirror(y, height);
        for x in 0..nw {
            spec.push(Complex::new(plane[sy * width + mirror(x, width)], 0.0));
        }
    }
    fft2(&mut spec, nh, nw, &*row_fwd, &*col_fwd);

    let scale = 1.0 / (nh * nw) as f64;
    sigmas
        .iter()
        .map(|&sigma| {
            let (hy, hx) = (transfer(nh, sigma), transfer(nw, sigma));
            let mut buf: Vec<Complex<f64>> = spec
                .iter()
                .enumerate()
                .map(|(i, v)| v * (hy[i / nw] * hx[i % nw]))
                .collect();
            fft2(&mut buf, nh, nw, &*row_inv, &*col_inv);
            let mut out = Vec::with_capacity(height * width);
            for y in 0..height {
                for x in 0..width {
                    out.push(buf[y * nw + x].re * scale);
                }
            }
            out
        })
        .collect()
}

fn fft2(buf: &mut [Complex<f64>], nh: usize, nw: usize, rows: &dyn rustfft::Fft<f64>, cols: &dyn rustfft::Fft<f64>) {
    for row in buf.chunks_exact_mut(nw) {
        rows.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); nh];
    for x in 0..nw {
        for y in 0..nh {
            col[y] = buf[y * nw + x];
        }
        cols.process(&mut col);
        for y in 0..nh {
            buf[y * nw + x] = col[y];
        }
    }
}

fn is_constant(v: &[f64]) -> bool {
    v.iter().all(|x| *x == v[0])
}

/// Per-channel multiscale retinex response before clipping:
/// the mean over scales of `ln(I + ε) − ln(G_σ ∗ I + ε)`.
pub fn retinex_response(img: &ImageRgb, cfg: &RetinexConfig) -> Result<[Vec<f64>; 3]> {
    cfg.validate()?;
    let (h, w) = img.dims();
    let eps = cfg.epsilon;
    let k = cfg.scales.len() as f64;
    let channel = |c: usize| -> Vec<f64> {
        let plane = img.channel(c);
        let blurs = gaussian_blur_multi(&plane, h, w, &cfg.scales);
        let mut r = vec![0.0; plane.len()];
        for blur in &blurs {
            for ((acc, &v), &b) in r.iter_mut().zip(&plane).zip(blur) {
                *acc += (v + eps).ln() - (b.max(0.0) + eps).ln();
            }
        }
        r.iter_mut().for_each(|v| *v /= k);
        r
    };
    Ok([channel(0), channel(1), channel(2)])
}

/// Clip points of one response channel under the zero-bin rule.
pub fn clip_points(response: &[f64], cfg: &RetinexConfig) -> (f64, f64) {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for v in response {
        *counts.entry((v / cfg.bin_width).trunc() as i64).or_default() += 1;
    }
    let min = response.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = response.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let zero = counts.get(&0).copied().unwrap_or(0).max(1) as f64;
    let threshold = cfg.zero_bin_ratio * zero;
    let low = counts
        .range(..0)
        .rev()
        .find(|(_, &c)| (c as f64) < threshold)
        .map(|(&u, _)| u as f64 * cfg.bin_width)
        .unwrap_or(min);
    let high = counts
        .range(1..)
        .find(|(_, &c)| (c as f64) < threshold)
        .map(|(&u, _)| u as f64 * cfg.bin_width)
        .unwrap_or(max);
    (low.max(min), high.min(max))
}

/// Multiscale retinex with zero-bin clipping, stretched to `[0, 1]` per channel.
/// Constant channels (and channels whose clipped response is flat) pass through.
pub fn emsr_apply(img: &ImageRgb, cfg: &RetinexConfig) -> Result<ImageRgb> {
    let responses = retinex_response(img, cfg)?;
    let (h, w) = img.dims();
    let mut planes: Vec<Vec<f64>> = Vec::with_capacity(3);
    for (c, r) in responses.iter().enumerate() {
        let original = img.channel(c);
        if is_constant(&original) {
            planes.push(original);
            continue;
        }
        let (lo, hi) = clip_points(r, cfg);
        if !(hi - lo > 1e-12) {
            planes.push(original);
            continue;
        }
        planes.push(r.iter().map(|v| (v.clamp(lo, hi) - lo) / (hi - lo)).collect());
    }
    ImageRgb::from_channels(h, w, [&planes[0], &planes[1], &planes[2]])
}

/// Fraction clipped at each end by [`contrast_enhance`].
pub const ENHANCE_CLIP: f64 = 0.05;

/// Percentile stretch shared with the training-target enhancement.
pub fn contrast_enhance(img: &ImageRgb) -> Result<ImageRgb> {
    enhance_bright(img, ENHANCE_CLIP)
}

/// `alpha·retinexed + (1 − alpha)·dehazed`.
pub fn blend(dehazed: &ImageRgb, retinexed: &ImageRgb, alpha: f64) -> Result<ImageRgb> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Domain(format!("blend alpha must lie in [0, 1], got {alpha}")));
    }
    if alpha == 0.0 {
        dehazed.ensure_same_dims(retinexed)?;
        return Ok(dehazed.clone());
    }
    if alpha == 1.0 {
        dehazed.ensure_same_dims(retinexed)?;
        return Ok(retinexed.clone());
    }
    dehazed.zip_map(retinexed, |d, r| alpha * r + (1.0 - alpha) * d)
}
