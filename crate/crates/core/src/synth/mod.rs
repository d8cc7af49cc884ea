//! Training-triplet synthesis from aligned bright/dark image pairs.
//!
//! A pair `(B, D)` is first cross-mixed into `B' = 0.7B + 0.3D` and
//! `D' = 0.3B + 0.7D`. One haze field is then drawn and applied to both
//! members, and the bright target is contrast-stretched.
//!
//! Haze follows `I' = I·t + A·(1 − t)`. The transmission `t` is per-pixel
//! uniform noise, Gaussian-blurred with σ = `field_smoothness`, min-max
//! normalised, and mapped to `[1 − veil_strength, 1]`.

mod dataset;
mod scenes;

pub use dataset::{
    builtin_triplets, load_eval_items, load_split, synthesize_dataset, EvalItem, Manifest, ManifestEntry, PairSource,
    Split, SynthOptions, MANIFEST_FILE,
};
pub use scenes::builtin_pair;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::emsr::gaussian_blur;
use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::seeds::{rng, sub_seed};

/// Default atmospheric light, slightly cool.
pub const DEFAULT_ATMOSPHERE: [f64; 3] = [0.9, 0.9, 0.92];
/// Range sampled for `veil_strength` per triplet.
pub const VEIL_RANGE: (f64, f64) = (0.3, 0.8);
pub const DEFAULT_CLIP: f64 = 0.05;

/// `(B', D') = (0.7B + 0.3D, 0.3B + 0.7D)`.
pub fn composite_pair(bright: &ImageRgb, dark: &ImageRgb) -> Result<(ImageRgb, ImageRgb)> {
    let b = bright.zip_map(dark, |b, d| 0.7 * b + 0.3 * d)?;
    let d = bright.zip_map(dark, |b, d| 0.3 * b + 0.7 * d)?;
    Ok((b, d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HazeParams {
    pub veil_strength: f64,
    pub field_smoothness: f64,
    pub atmospheric_color: [f64; 3],
    pub seed: u64,
}

impl HazeParams {
    pub fn new(veil_strength: f64, field_smoothness: f64, seed: u64) -> Self {
        Self {
            veil_strength,
            field_smoothness,
            atmospheric_color: DEFAULT_ATMOSPHERE,
            seed,
        }
    }

    /// Random parameters for an `height × width` image: veil in [`VEIL_RANGE`],
    /// correlation length between 1/16 and 1/4 of the shorter side.
    pub fn sample(seed: u64, height: usize, width: usize) -> Self {
        let mut r = rng(sub_seed(seed, "haze-params"));
        let short = height.min(width).max(1) as f64;
        Self::new(
            r.random_range(VEIL_RANGE.0..=VEIL_RANGE.1),
            r.random_range(short / 16.0..=short / 4.0).max(0.5),
            seed,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.veil_strength) {
            return Err(Error::Config(format!(
                "veil_strength {} outside [0, 1]",
                self.veil_strength
            )));
        }
        if !(self.field_smoothness > 0.0 && self.field_smoothness.is_finite()) {
            return Err(Error::Config("field_smoothness must be positive".into()));
        }
        if self.atmospheric_color.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("atmospheric_color must lie in [0, 1]^3".into()));
        }
        Ok(())
    }
}

/// Transmission field in `[1 − veil, 1]`, row-major `height × width`.
pub fn haze_field(height: usize, width: usize, p: &HazeParams) -> Result<Vec<f64>> {
    p.validate()?;
    let mut r = rng(sub_seed(p.seed, "haze-field"));
    let noise: Vec<f64> = (0..height * width).map(|_| r.random::<f64>()).collect();
    let smooth = gaussian_blur(&noise, height, width, p.field_smoothness);
    let lo = smooth.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = smooth.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    Ok(smooth
        .iter()
        .map(|v| {
            let n = if span > 1e-12 { (v - lo) / span } else { 0.5 };
            1.0 - p.veil_strength * n
        })
        .collect())
}

/// `I·t + A·(1 − t)` for a given transmission field.
pub fn apply_veil(img: &ImageRgb, t: &[f64], atmosphere: [f64; 3]) -> Result<ImageRgb> {
    let (h, w) = img.dims();
    if t.len() != h * w {
        return Err(Error::Shape(format!(
            "transmission field has {} values for {h}x{w}",
            t.len()
        )));
    }
    let data = img
        .data()
        .chunks_exact(3)
        .zip(t)
        .flat_map(|(px, &t)| (0..3).map(move |c| px[c] * t + atmosphere[c] * (1.0 - t)))
        .collect();
    ImageRgb::from_vec_clamped(h, w, data)
}

pub fn add_haze(img: &ImageRgb, p: &HazeParams) -> Result<ImageRgb> {
    let (h, w) = img.dims();
    apply_veil(img, &haze_field(h, w, p)?, p.atmospheric_color)
}

/// Linearly interpolated percentile (`q` in `[0, 1]`) of unsorted values.
pub fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    percentile_sorted(&v, q)
}

fn percentile_sorted(v: &[f64], q: f64) -> f64 {
    let pos = q * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let j = (i + 1).min(v.len() - 1);
    v[i] + (v[j] - v[i]) * (pos - i as f64)
}

/// Per-channel percentile clip and affine stretch to `[0, 1]`.
/// Channels whose percentile span is degenerate are returned unchanged.
pub fn enhance_bright(img: &ImageRgb, clip_fraction: f64) -> Result<ImageRgb> {
    if !(0.0..0.5).contains(&clip_fraction) {
        return Err(Error::Config(format!("clip fraction {clip_fraction} outside [0, 0.5)")));
    }
    let (h, w) = img.dims();
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|c| {
            let plane = img.channel(c);
            let mut sorted = plane.clone();
            sorted.sort_by(|a, b| a.total_cmp(b));
            let lo = percentile_sorted(&sorted, clip_fraction);
            let hi = percentile_sorted(&sorted, 1.0 - clip_fraction);
            if hi - lo <= 1e-12 {
                return plane;
            }
            plane.iter().map(|v| (v.clamp(lo, hi) - lo) / (hi - lo)).collect()
        })
        .collect();
    ImageRgb::from_channels(h, w, [&planes[0], &planes[1], &planes[2]])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageTriplet {
    pub bright: ImageRgb,
    pub bright_hazy: ImageRgb,
    pub dark_hazy: ImageRgb,
    pub seed: u64,
}

impl ImageTriplet {
    pub fn new(bright: ImageRgb, bright_hazy: ImageRgb, dark_hazy: ImageRgb, seed: u64) -> Result<Self> {
        bright.ensure_same_dims(&bright_hazy)?;
        bright.ensure_same_dims(&dark_hazy)?;
        Ok(Self {
            bright,
            bright_hazy,
            dark_hazy,
            seed,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.bright.dims()
    }

    pub fn map(&self, f: impl Fn(&ImageRgb) -> Result<ImageRgb>) -> Result<Self> {
        Self::new(f(&self.bright)?, f(&self.bright_hazy)?, f(&self.dark_hazy)?, self.seed)
    }
}

pub fn make_triplet(bright: &ImageRgb, dark: &ImageRgb, p: &HazeParams) -> Result<ImageTriplet> {
    let (b, d) = composite_pair(bright, dark)?;
    let (h, w) = b.dims();
    let t = haze_field(h, w, p)?;
    ImageTriplet::new(
        enhance_bright(&b, DEFAULT_CLIP)?,
        apply_veil(&b, &t, p.atmospheric_color)?,
        apply_veil(&d, &t, p.atmospheric_color)?,
        p.seed,
    )
}

/// Geometry of one augmentation draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugmentPlan {
    pub resize: (usize, usize),
    pub top: usize,
    pub left: usize,
    pub crop: usize,
    pub quarter_turns: u8,
    pub flip: bool,
}

/// Working size before cropping (width, height).
pub const AUGMENT_RESIZE: (usize, usize) = (512, 256);

impl AugmentPlan {
    /// Random crop position, right-angle rotation and horizontal flip.
    pub fn draw(resize: (usize, usize), crop: usize, seed: u64) -> Result<Self> {
        let (w, h) = resize;
        if crop == 0 || crop > w.min(h) {
            return Err(Error::Size(format!("crop {crop} does not fit a {w}x{h} image")));
        }
        let mut r = rng(sub_seed(seed, "augment"));
        Ok(Self {
            resize,
            top: r.random_range(0..=h - crop),
            left: r.random_range(0..=w - crop),
            crop,
            quarter_turns: r.random_range(0..4u8),
            flip: r.random(),
        })
    }

    /// Resize and centre crop only.
    pub fn center(resize: (usize, usize), crop: usize) -> Result<Self> {
        let (w, h) = resize;
        if crop == 0 || crop > w.min(h) {
            return Err(Error::Size(format!("crop {crop} does not fit a {w}x{h} image")));
        }
        Ok(Self {
            resize,
            top: (h - crop) / 2,
            left: (w - crop) / 2,
            crop,
            quarter_turns: 0,
            flip: false,
        })
    }

    pub fn apply(&self, img: &ImageRgb) -> Result<ImageRgb> {
        let (w, h) = self.resize;
        let out = img.resize(w, h)?.crop(self.top, self.left, self.crop, self.crop)?;
        let out = out.rotate90(self.quarter_turns);
        Ok(if self.flip { out.flip_horizontal() } else { out })
    }
}

/// Same random transform applied to all three members.
pub fn augment_with(t: &ImageTriplet, plan: &AugmentPlan) -> Result<ImageTriplet> {
    t.map(|img| plan.apply(img))
}

/// Resize to 512×256, random `crop`×`crop` window, rotation and flip.
pub fn augment(t: &ImageTriplet, crop: usize, seed: u64) -> Result<ImageTriplet> {
    augment_with(t, &AugmentPlan::draw(AUGMENT_RESIZE, crop, seed)?)
}
