//! Training objectives.
//!
//! Every loss has a tensor form (batched `(B, 3, H, W)`, differentiable, used
//! by the trainers) and an image form returning `f64` (the `l_*` functions).
//!
//! The multiscale frequency-domain loss uses the orthonormal 2-D DFT
//! (`1/sqrt(H·W)` scaling), so a constant offset `c` between prediction and
//! target contributes `|c| / sqrt(H·W)` at that scale: one non-zero bin of
//! magnitude `|c|·sqrt(H·W)` per channel, averaged over `3·H·W` elements.

use std::path::PathBuf;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::metrics::{ms_ssim_weights, SsimConfig};
use crate::nn::{ops, Conv2d, Scope, VarStore};
use crate::seeds::sub_seed;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub gamma1: f64,
    pub gamma2: f64,
    #[serde(default)]
    pub gamma3: f64,
    #[serde(default)]
    pub gamma4: f64,
}

impl LossWeights {
    pub const fn new(gamma1: f64, gamma2: f64, gamma3: f64, gamma4: f64) -> Self {
        Self {
            gamma1,
            gamma2,
            gamma3,
            gamma4,
        }
    }

    pub const fn llm_default() -> Self {
        Self::new(1.0, 0.1, 0.0, 0.0)
    }

    pub const fn dhm_default() -> Self {
        Self::new(1.0, 0.5, 0.05, 0.005)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.gamma1, self.gamma2, self.gamma3, self.gamma4]
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.gamma1 * k, self.gamma2 * k, self.gamma3 * k, self.gamma4 * k)
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.as_array();
        if g.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        if g.iter().all(|v| *v == 0.0) {
            return Err(Error::Config("at least one loss weight must be positive".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Mean absolute error.
pub fn content(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(pred, target)?;
    Ok((pred - target)?.abs()?.mean_all()?)
}

/// Huber form with threshold `beta`, averaged.
pub fn smooth_l1(pred: &Tensor, target: &Tensor, beta: f64) -> Result<Tensor> {
    same_shape(pred, target)?;
    if !(beta > 0.0) {
        return Err(Error::Config(format!("smooth-L1 beta must be positive, got {beta}")));
    }
    let d = (pred - target)?.abs()?;
    // m = min(d, beta): 0.5·m²/beta + (d − m) covers both branches
    let m = d.clamp(0.0, beta)?;
    let quad = (m.sqr()? * (0.5 / beta))?;
    Ok((quad + (d - m)?)?.mean_all()?)
}

/// Orthonormal real and imaginary DFT parts over the last two dims.
fn dft2(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4()?;
    let basis = |n: usize| -> Result<(Tensor, Tensor)> {
        let s = 1.0 / (n as f64).sqrt();
        let mut cos = Vec::with_capacity(n * n);
        let mut sin = Vec::with_capacity(n * n);
        for j in 0..n {
            for k in 0..n {
                let a = 2.0 * std::f64::consts::PI * ((j * k) % n) as f64 / n as f64;
                cos.push(a.cos() * s);
                sin.push(a.sin() * s);
            }
        }
        let dev = x.device();
        Ok((
            Tensor::from_vec(cos, (n, n), dev)?.to_dtype(x.dtype())?,
            Tensor::from_vec(sin, (n, n), dev)?.to_dtype(x.dtype())?,
        ))
    };
    let (cw, sw) = basis(w)?;
    let (ch, sh) = basis(h)?;
    // right-multiply rows by the W basis
    let rows = x.reshape((b * c * h, w))?;
    let xc = rows.matmul(&cw)?.reshape((b * c, h, w))?;
    let xs = rows.matmul(&sw)?.reshape((b * c, h, w))?;
    // left-multiply by the (symmetric) H basis via transposes
    let left = |t: &Tensor, m: &Tensor| -> Result<Tensor> {
        let tt = t.transpose(1, 2)?.contiguous()?.reshape((b * c * w, h))?;
        Ok(tt.matmul(m)?.reshape((b * c, w, h))?.transpose(1, 2)?)
    };
    // exp(-iθ) = cos − i·sin on both axes
    let re = (left(&xc, &ch)? - left(&xs, &sh)?)?;
    let im = (left(&xs, &ch)? + left(&xc, &sh)?)?.neg()?;
    Ok((re, im))
}

fn halve(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let x = ops::crop_to(x, h - h % 2, w - w % 2)?;
    ops::avg_pool(&x, 2)
}

/// Sum over `scales` 2×-pyramid levels of mean |ΔRe| + mean |ΔIm| of the orthonormal DFT.
pub fn msfd(pred: &Tensor, target: &Tensor, scales: usize) -> Result<Tensor> {
    same_shape(pred, target)?;
    if scales == 0 {
        return Err(Error::Config("MSFD needs at least one scale".into()));
    }
    let mut d = (pred - target)?;
    let mut total: Option<Tensor> = None;
    for s in 0..scales {
        if s > 0 {
            let (_, _, h, w) = d.dims4()?;
            if h < 2 || w < 2 {
                return Err(Error::Size(format!("MSFD scale {s} does not fit a {h}x{w} image")));
            }
            d = halve(&d)?;
        }
        let (re, im) = dft2(&d)?;
        let term = (re.abs()?.mean_all()? + im.abs()?.mean_all()?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one scale"))
}

/// Per-(sample, channel) mean SSIM and contrast-structure maps' means.
fn ssim_terms(x: &Tensor, y: &Tensor, cfg: &SsimConfig) -> Result<(Tensor, Tensor)> {
    let (b, c, h, w) = x.dims4()?;
    let n = b * c;
    let taps = cfg.kernel();
    let k = taps.len();
    let kh = Tensor::from_vec(taps.clone(), (1, 1, 1, k), x.device())?.to_dtype(x.dtype())?;
    let kv = Tensor::from_vec(taps, (1, 1, k, 1), x.device())?.to_dtype(x.dtype())?;
    let x1 = x.reshape((n, 1, h, w))?;
    let y1 = y.reshape((n, 1, h, w))?;
    let stack = Tensor::cat(&[&x1, &y1, &x1.sqr()?, &y1.sqr()?, &(&x1 * &y1)?], 0)?;
    let f = ops::conv2d(&ops::conv2d(&stack, &kh, None, 1, (0, 0))?, &kv, None, 1, (0, 0))?;
    let mx = f.narrow(0, 0, n)?;
    let my = f.narrow(0, n, n)?;
    let sxx = (f.narrow(0, 2 * n, n)? - mx.sqr()?)?;
    let syy = (f.narrow(0, 3 * n, n)? - my.sqr()?)?;
    let sxy = (f.narrow(0, 4 * n, n)? - (&mx * &my)?)?;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let cs_map = ((sxy * 2.0)? + c2)?.div(&((sxx + syy)? + c2)?)?;
    let lum = (((&mx * &my)? * 2.0)? + c1)?.div(&((mx.sqr()? + my.sqr()?)? + c1)?)?;
    let ssim_map = (&lum * &cs_map)?;
    let mean = |t: &Tensor| -> Result<Tensor> { Ok(t.reshape((b, c, ()))?.mean(2)?) };
    Ok((mean(&ssim_map)?, mean(&cs_map)?))
}

/// Floor applied to per-level terms before exponentiation (the power has no
/// derivative at zero).
const MS_SSIM_FLOOR: f64 = 1e-6;

/// Batch- and channel-averaged MS-SSIM. `levels = None` uses the deepest
/// pyramid the input allows (at most 5).
pub fn ms_ssim_tensor(pred: &Tensor, target: &Tensor, levels: Option<usize>, cfg: &SsimConfig) -> Result<Tensor> {
    same_shape(pred, target)?;
    let (_, _, h, w) = pred.dims4()?;
    let max = cfg.max_levels(h, w);
    let levels = levels.unwrap_or(max);
    if levels == 0 || levels > max {
        return Err(Error::Size(format!(
            "{h}x{w} cannot resolve {levels} MS-SSIM levels with a {}-pixel window",
            cfg.window
        )));
    }
    let weights = ms_ssim_weights(levels);
    let (mut x, mut y) = (pred.clone(), target.clone());
    let mut prod: Option<Tensor> = None;
    for (l, wgt) in weights.iter().enumerate() {
        let (s, cs) = ssim_terms(&x, &y, cfg)?;
        let term = if l + 1 == levels { s } else { cs };
        let term = term.clamp(MS_SSIM_FLOOR, f64::MAX)?.powf(*wgt)?;
        prod = Some(match prod {
            Some(p) => (p * term)?,
            None => term,
        });
        if l + 1 < levels {
            x = halve(&x)?;
            y = halve(&y)?;
        }
    }
    Ok(prod.expect("levels >= 1").mean_all()?)
}

/// `1 − MS-SSIM`.
pub fn ms_ssim_loss(pred: &Tensor, target: &Tensor, levels: Option<usize>, cfg: &SsimConfig) -> Result<Tensor> {
    Ok(ms_ssim_tensor(pred, target, levels, cfg)?.affine(-1.0, 1.0)?)
}

/// A frozen feature provider for the perceptual loss.
pub trait FeatureExtractor: Send + Sync {
    /// Tap-layer activations for a batch `(B, 3, H, W)`.
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>>;
}

/// Single tap returning the input itself.
pub struct IdentityExtractor;

impl FeatureExtractor for IdentityExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        Ok(vec![x.clone()])
    }
}

/// Fixed-seed random 3×3 conv stack with a tap after every ReLU.
pub struct RandomConvExtractor {
    convs: Vec<Conv2d>,
}

impl RandomConvExtractor {
    pub fn new(seed: u64, widths: &[usize], dtype: DType) -> Result<Self> {
        if widths.is_empty() {
            return Err(Error::Config("random-conv extractor needs at least one layer".into()));
        }
        let store = VarStore::initializing(sub_seed(seed, "extractor"), dtype);
        let root = store.root();
        let mut cin = 3;
        let mut convs = Vec::new();
        for (i, &c) in widths.iter().enumerate() {
            convs.push(Conv2d::new(&root.pp(format!("conv{i}")), cin, c, 3)?);
            cin = c;
        }
        let convs = convs.into_iter().map(|c| c.detached()).collect();
        Ok(Self { convs })
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut taps = Vec::with_capacity(self.convs.len());
        let mut y = x.clone();
        for conv in &self.convs {
            y = conv.forward(&y)?.relu()?;
            taps.push(y.clone());
        }
        Ok(taps)
    }
}

/// VGG16 convolutional trunk up to `relu3_3`, loaded from a safetensors file
/// with torchvision parameter names (`features.{0,2,5,7,10,12,14}.{weight,bias}`).
pub struct Vgg16Extractor {
    blocks: Vec<Vec<Conv2d>>,
    mean: Tensor,
    std: Tensor,
}

impl Vgg16Extractor {
    const LAYOUT: [&'static [(usize, usize, usize)]; 3] = [
        &[(0, 3, 64), (2, 64, 64)],
        &[(5, 64, 128), (7, 128, 128)],
        &[(10, 128, 256), (12, 256, 256), (14, 256, 256)],
    ];

    pub fn load(path: &std::path::Path, dtype: DType) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu)
            .map_err(|e| Error::Config(format!("cannot load VGG16 weights {}: {e}", path.display())))?;
        let store = VarStore::frozen(tensors.into_iter().collect(), dtype)
            .map_err(|e| Error::Config(format!("VGG16 weights: {e}")))?;
        let root: Scope = store.root();
        let mut blocks = Vec::new();
        for block in Self::LAYOUT {
            let mut convs = Vec::new();
            for &(idx, cin, cout) in block {
                let conv = Conv2d::new(&root.pp(format!("features.{idx}")), cin, cout, 3)
                    .map_err(|e| Error::Config(format!("VGG16 weights: {e}")))?;
                convs.push(conv.detached());
            }
            blocks.push(convs);
        }
        let mean = Tensor::from_vec(vec![0.485, 0.456, 0.406], (1, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        let std = Tensor::from_vec(vec![0.229, 0.224, 0.225], (1, 3, 1, 1), &Device::Cpu)?.to_dtype(dtype)?;
        Ok(Self { blocks, mean, std })
    }
}

impl FeatureExtractor for Vgg16Extractor {
    fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let mut y = x.broadcast_sub(&self.mean)?.broadcast_div(&self.std)?;
        let mut taps = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            if i > 0 {
                y = ops::max_pool(&y, 2)?;
            }
            for conv in block {
                y = conv.forward(&y)?.relu()?;
            }
            taps.push(y.clone());
        }
        Ok(taps)
    }
}

/// Extractor selection as it appears in training configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorConfig {
    Identity,
    RandomConv { seed: u64, widths: Vec<usize> },
    Vgg16 { weights: PathBuf },
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        ExtractorConfig::RandomConv {
            seed: 0,
            widths: vec![8, 16, 16],
        }
    }
}

impl ExtractorConfig {
    pub fn build(&self, dtype: DType) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self {
            ExtractorConfig::Identity => Box::new(IdentityExtractor),
            ExtractorConfig::RandomConv { seed, widths } => Box::new(RandomConvExtractor::new(*seed, widths, dtype)?),
            ExtractorConfig::Vgg16 { weights } => Box::new(Vgg16Extractor::load(weights, dtype)?),
        })
    }
}

/// Sum over taps of the mean squared feature difference; target features carry no gradient.
pub fn perceptual(pred: &Tensor, target: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(pred, target)?;
    let fp = extractor.features(pred)?;
    let ft = extractor.features(&target.detach())?;
    if fp.is_empty() || fp.len() != ft.len() {
        return Err(Error::Config("feature extractor produced no tap layers".into()));
    }
    let mut total: Option<Tensor> = None;
    for (a, b) in fp.iter().zip(&ft) {
        let term = (a - b.detach())?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("non-empty taps"))
}

/// Generator loss `mean(softplus(−z)) = −mean(log σ(z))`.
pub fn adv_generator_logits(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(ops::softplus(&fake_logits.neg()?)?.mean_all()?)
}

/// Discriminator loss `−mean(log σ(z_r)) − mean(log(1 − σ(z_f)))`.
pub fn adv_discriminator_logits(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = ops::softplus(&real_logits.neg()?)?.mean_all()?;
    let fake = ops::softplus(fake_logits)?.mean_all()?;
    Ok((real + fake)?)
}

fn check_probabilities(scores: &Tensor) -> Result<()> {
    let v: Vec<f64> = scores.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if v.is_empty() || v.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
        return Err(Error::Domain(
            "discriminator scores must lie strictly inside (0, 1)".into(),
        ));
    }
    Ok(())
}

/// Generator loss from probabilities: `−mean(log s)`.
pub fn adv_generator(fake_scores: &Tensor) -> Result<Tensor> {
    check_probabilities(fake_scores)?;
    Ok(fake_scores.log()?.mean_all()?.neg()?)
}

pub fn adv_discriminator(real_scores: &Tensor, fake_scores: &Tensor) -> Result<Tensor> {
    check_probabilities(real_scores)?;
    check_probabilities(fake_scores)?;
    let real = real_scores.log()?.mean_all()?.neg()?;
    let fake = fake_scores.affine(-1.0, 1.0)?.log()?.mean_all()?.neg()?;
    Ok((real + fake)?)
}

/// Number of MSFD pyramid scales (1, ½, ¼).
pub const MSFD_SCALES: usize = 3;

/// `γ₁·content + γ₂·MSFD`.
pub fn llm_total(pred: &Tensor, target: &Tensor, w: &LossWeights) -> Result<Tensor> {
    let c = content(pred, target)?;
    let f = msfd(pred, target, MSFD_SCALES)?;
    Ok(((c * w.gamma1)? + (f * w.gamma2)?)?)
}

/// Individual terms of the dehazing objective.
#[derive(Clone, Debug)]
pub struct DhmTerms {
    pub smooth_l1: Tensor,
    pub ms_ssim: Tensor,
    pub perceptual: Tensor,
    pub adversarial: Tensor,
}

impl DhmTerms {
    pub fn total(&self, w: &LossWeights) -> Result<Tensor> {
        Ok((((&self.smooth_l1 * w.gamma1)? + (&self.ms_ssim * w.gamma2)?)?
            + ((&self.perceptual * w.gamma3)? + (&self.adversarial * w.gamma4)?)?)?)
    }
}

/// Adversarial input to the dehazing objective.
pub enum AdvInput<'a> {
    Probabilities(&'a Tensor),
    Logits(&'a Tensor),
}

pub fn dhm_terms(
    pred: &Tensor,
    target: &Tensor,
    adv: AdvInput,
    extractor: &dyn FeatureExtractor,
    ssim: &SsimConfig,
) -> Result<DhmTerms> {
    Ok(DhmTerms {
        smooth_l1: smooth_l1(pred, target, 1.0)?,
        ms_ssim: ms_ssim_loss(pred, target, None, ssim)?,
        perceptual: perceptual(pred, target, extractor)?,
        adversarial: match adv {
            AdvInput::Probabilities(s) => adv_generator(s)?,
            AdvInput::Logits(z) => adv_generator_logits(z)?,
        },
    })
}

/// `γ₁·smooth-L1 + γ₂·(1 − MS-SSIM) + γ₃·perceptual + γ₄·adversarial`.
pub fn dhm_total(
    pred: &Tensor,
    target: &Tensor,
    fake_scores: &Tensor,
    w: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<Tensor> {
    dhm_terms(
        pred,
        target,
        AdvInput::Probabilities(fake_scores),
        extractor,
        &SsimConfig::default(),
    )?
    .total(w)
}

// ---------------------------------------------------------------------------
// Image-level forms

fn pair(pred: &ImageRgb, target: &ImageRgb) -> Result<(Tensor, Tensor)> {
    pred.ensure_same_dims(target)?;
    Ok((
        pred.to_tensor(DType::F64, &Device::Cpu)?,
        target.to_tensor(DType::F64, &Device::Cpu)?,
    ))
}

pub fn l_content(pred: &ImageRgb, target: &ImageRgb) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    ops::scalar(&content(&p, &t)?)
}

pub fn l_msfd(pred: &ImageRgb, target: &ImageRgb, scales: usize) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    ops::scalar(&msfd(&p, &t, scales)?)
}

pub fn l_smooth_l1(pred: &ImageRgb, target: &ImageRgb, beta: f64) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    ops::scalar(&smooth_l1(&p, &t, beta)?)
}

pub fn l_ms_ssim(pred: &ImageRgb, target: &ImageRgb) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    ops::scalar(&ms_ssim_loss(&p, &t, None, &SsimConfig::default())?)
}

pub fn l_perceptual(pred: &ImageRgb, target: &ImageRgb, extractor: &dyn FeatureExtractor) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    ops::scalar(&perceptual(&p, &t, extractor)?)
}

fn scores_tensor(scores: &[f64]) -> Result<Tensor> {
    Ok(Tensor::from_slice(scores, scores.len(), &Device::Cpu)?)
}

pub fn l_adversarial(fake_scores: &[f64]) -> Result<f64> {
    ops::scalar(&adv_generator(&scores_tensor(fake_scores)?)?)
}

pub fn l_adversarial_discriminator(real_scores: &[f64], fake_scores: &[f64]) -> Result<f64> {
    ops::scalar(&adv_discriminator(
        &scores_tensor(real_scores)?,
        &scores_tensor(fake_scores)?,
    )?)
}

pub fn l_llm_total(pred: &ImageRgb, target: &ImageRgb, w: &LossWeights) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    ops::scalar(&llm_total(&p, &t, w)?)
}

pub fn l_dhm_total(
    pred: &ImageRgb,
    target: &ImageRgb,
    fake_scores: &[f64],
    w: &LossWeights,
    extractor: &dyn FeatureExtractor,
) -> Result<f64> {
    let (p, t) = pair(pred, target)?;
    ops::scalar(&dhm_total(&p, &t, &scores_tensor(fake_scores)?, w, extractor)?)
}
