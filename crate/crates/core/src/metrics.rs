//! Full-reference quality metrics: PSNR, SSIM and MS-SSIM.
//!
//! SSIM uses the usual reference configuration (11×11 Gaussian window with
//! σ = 1.5, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1) evaluated over "valid"
//! window positions only and averaged over the three channels. MS-SSIM builds
//! a 2×2-average pyramid; when fewer than five levels are requested the
//! standard level weights are truncated and renormalised.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::image::ImageRgb;

/// Standard five-level MS-SSIM weights, finest level first.
pub const MS_SSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimConfig {
    pub fn c1(&self) -> f64 {
        self.k1 * self.k1
    }

    pub fn c2(&self) -> f64 {
        self.k2 * self.k2
    }

    /// Normalised 1-D Gaussian taps.
    pub fn kernel(&self) -> Vec<f64> {
        gaussian_taps(self.window, self.sigma)
    }

    /// Largest pyramid depth (capped at 5) whose coarsest level still fits the window.
    pub fn max_levels(&self, height: usize, width: usize) -> usize {
        let mut levels = 0;
        let (mut h, mut w) = (height, width);
        while levels < MS_SSIM_WEIGHTS.len() && h.min(w) >= self.window {
            levels += 1;
            h /= 2;
            w /= 2;
        }
        levels
    }
}

pub(crate) fn gaussian_taps(window: usize, sigma: f64) -> Vec<f64> {
    let center = (window as f64 - 1.0) / 2.0;
    let taps: Vec<f64> = (0..window)
        .map(|i| {
            let d = i as f64 - center;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / sum).collect()
}

/// Renormalised weights for a pyramid of `levels` scales.
pub fn ms_ssim_weights(levels: usize) -> Vec<f64> {
    let w = &MS_SSIM_WEIGHTS[..levels];
    let sum: f64 = w.iter().sum();
    w.iter().map(|v| v / sum).collect()
}

/// Mean squared error over all pixels and channels.
pub fn mse(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let n = a.data().len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
}

/// Peak signal-to-noise ratio in dB with peak 1.0; `f64::INFINITY` for identical images.
pub fn psnr(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / m).log10())
}

/// Mean SSIM and mean contrast-structure term of one plane pair.
#[derive(Clone, Copy, Debug)]
pub(crate) struct PlaneStats {
    pub ssim: f64,
    pub cs: f64,
}

/// Separable "valid" filtering of a row-major plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> (Vec<f64>, usize, usize) {
    let k = taps.len();
    let ow = w + 1 - k;
    let oh = h + 1 - k;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let src = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = taps.iter().zip(&src[x..x + k]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, t) in taps.iter().enumerate() {
                acc += t * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

pub(crate) fn plane_stats(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> PlaneStats {
    let taps = cfg.kernel();
    let (mu_a, _, _) = filter_valid(a, h, w, &taps);
    let (mu_b, _, _) = filter_valid(b, h, w, &taps);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (e_aa, _, _) = filter_valid(&aa, h, w, &taps);
    let (e_bb, _, _) = filter_valid(&bb, h, w, &taps);
    let (e_ab, _, _) = filter_valid(&ab, h, w, &taps);
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let n = mu_a.len() as f64;
    let (mut s_sum, mut cs_sum) = (0.0, 0.0);
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = e_aa[i] - ma * ma;
        let vb = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let cs = (2.0 * cov + c2) / (va + vb + c2);
        let lum = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
        s_sum += lum * cs;
        cs_sum += cs;
    }
    PlaneStats {
        ssim: s_sum / n,
        cs: cs_sum / n,
    }
}

/// SSIM with the default configuration.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64> {
    ssim_with(a, b, &SsimConfig::default())
}

pub fn ssim_with(a: &ImageRgb, b: &ImageRgb, cfg: &SsimConfig) -> Result<f64> {
    a.ensure_same_dims(b)?;
    let (h, w) = a.dims();
    if h.min(w) < cfg.window {
        return Err(Error::Size(format!(
            "{h}x{w} is smaller than the {}-pixel SSIM window",
            cfg.window
        )));
    }
    let total: f64 = (0..3)
        .map(|c| plane_stats(&a.channel(c), &b.channel(c), h, w, cfg).ssim)
        .sum();
    Ok(total / 3.0)
}

/// 2×2 box downsampling; an odd trailing row or column is dropped.
pub(crate) fn downsample2(plane: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let i = 2 * y * w + 2 * x;
            out.push(0.25 * (plane[i] + plane[i + 1] + plane[i + w] + plane[i + w + 1]));
        }
    }
    (out, oh, ow)
}

/// Multi-scale SSIM over `levels` pyramid levels (1..=5) with the default window.
pub fn ms_ssim(a: &ImageRgb, b: &ImageRgb, levels: usize) -> Result<f64> {
    ms_ssim_with(a, b, levels, &SsimConfig::default())
}

pub fn ms_ssim_with(a: &ImageRgb, b: &ImageRgb, levels: usize, cfg: &SsimConfig) -> Result<f64> {
    a.ensure_same_dims(b)?;
    if !(1..=MS_SSIM_WEIGHTS.len()).contains(&levels) {
        return Err(Error::Config(format!("MS-SSIM levels must be in 1..=5, got {levels}")));
    }
    let (h, w) = a.dims();
    if cfg.max_levels(h, w) < levels {
        return Err(Error::Size(format!(
            "{h}x{w} cannot resolve {levels} MS-SSIM levels with a {}-pixel window",
            cfg.window
        )));
    }
    let weights = ms_ssim_weights(levels);
    let mut total = 0.0;
    for c in 0..3 {
        let (mut pa, mut pb, mut ph, mut pw) = (a.channel(c), b.channel(c), h, w);
        let mut value = 1.0;
        for (level, weight) in weights.iter().enumerate() {
            let stats = plane_stats(&pa, &pb, ph, pw, cfg);
            let term = if level + 1 == levels { stats.ssim } else { stats.cs };
            value *= term.max(0.0).powf(*weight);
            if level + 1 < levels {
                let (na, nh, nw) = downsample2(&pa, ph, pw);
                pb = downsample2(&pb, ph, pw).0;
                pa = na;
                ph = nh;
                pw = nw;
            }
        }
        total += value;
    }
    Ok(total / 3.0)
}

/// Per-image metrics. `psnr` serialises as the string `"inf"` for identical images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub file: String,
    #[serde(serialize_with = "ser_psnr", deserialize_with = "de_psnr")]
    pub psnr: f64,
    pub ssim: f64,
    pub ms_ssim: f64,
}

impl QualityReport {
    /// PSNR, SSIM and MS-SSIM (deepest pyramid the image supports).
    pub fn compute(file: impl Into<String>, output: &ImageRgb, target: &ImageRgb) -> Result<Self> {
        let cfg = SsimConfig::default();
        let (h, w) = target.dims();
        let levels = cfg.max_levels(h, w);
        if levels == 0 {
            return Err(Error::Size(format!("{h}x{w} is smaller than the SSIM window")));
        }
        Ok(Self {
            file: file.into(),
            psnr: psnr(output, target)?,
            ssim: ssim_with(output, target, &cfg)?,
            ms_ssim: ms_ssim_with(output, target, levels, &cfg)?,
        })
    }
}

pub(crate) fn ser_psnr<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

pub(crate) fn de_psnr<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }
    match Repr::deserialize(d)? {
        Repr::Num(v) => Ok(v),
        Repr::Str(s) if s == "inf" => Ok(f64::INFINITY),
        Repr::Str(s) => Err(serde::de::Error::custom(format!("invalid psnr {s:?}"))),
    }
}
