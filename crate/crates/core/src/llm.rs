//! Low-light module: an attention-guided, multiscale feature-fusion network
//! mapping dark-hazy images to bright-hazy images.
//!
//! Layout, for `scales = S` and width `c`:
//!
//! * full-scale branch: 3×3 conv, residual blocks, 3×3 conv, CBAM;
//! * each downscaled branch `s = 1..S`: a shallow feature module (two 3×3
//!   convs on the `2^s`-downsampled image), an encoder step (stride-2 conv plus
//!   residual blocks on the previous scale's encoding), a feature enhancement
//!   module (1×1 fusion of the two), and a cascade fusion module (1×1 fusion
//!   of every scale's encoding resized to scale `s`);
//! * an attention fusion module (global-average-pool channel gate followed by
//!   a 1×1 projection) at every scale;
//! * feature calibration modules carrying decoded lower-scale features
//!   (nearest upsample + 3×3 conv) into the next finer branch;
//! * output head: residual block, 3×3 conv to RGB, sigmoid.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::nn::layers::expect_channels;
use crate::nn::{ops, Cbam, ChannelGate, Conv2d, ResBlock, Scope, VarStore};
use crate::params::{arch_mismatch, ArchDescriptor, NetworkParams};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub scales: usize,
    pub base_channels: usize,
    pub resblocks: usize,
    pub cbam_reduction: usize,
    pub afm_reduction: usize,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            scales: 3,
            base_channels: 32,
            resblocks: 2,
            cbam_reduction: 8,
            afm_reduction: 4,
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales == 0 {
            return Err(Error::Config("llm scales must be >= 1".into()));
        }
        if self.base_channels < 8 {
            return Err(Error::Config(format!(
                "llm base_channels must be >= 8, got {}",
                self.base_channels
            )));
        }
        if self.cbam_reduction == 0 || self.afm_reduction == 0 {
            return Err(Error::Config("attention reductions must be >= 1".into()));
        }
        Ok(())
    }

    /// Input sides are padded up to a multiple of this.
    pub fn size_multiple(&self) -> usize {
        (1 << (self.scales - 1)) * 4
    }
}

/// Attention fusion: channel gate over the concatenated maps, then 1×1 projection.
#[derive(Clone, Debug)]
struct Afm {
    gate: ChannelGate,
    proj: Conv2d,
}

impl Afm {
    fn new(s: &Scope, cin: usize, cout: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            gate: ChannelGate::new(&s.pp("gate"), cin, reduction, false)?,
            proj: Conv2d::new(&s.pp("proj"), cin, cout, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(&self.gate.forward(x)?)?.relu()?)
    }
}

#[derive(Clone, Debug)]
struct LowerBranch {
    sfm1: Conv2d,
    sfm2: Conv2d,
    down: Conv2d,
    enc: Vec<ResBlock>,
    fem: Conv2d,
    cfm: Conv2d,
    afm: Afm,
    dec: ResBlock,
}

#[derive(Clone, Debug)]
pub struct LowLightNet {
    cfg: LlmConfig,
    conv_in: Conv2d,
    res: Vec<ResBlock>,
    conv_mid: Conv2d,
    cbam: Cbam,
    branches: Vec<LowerBranch>,
    fcm: Vec<Conv2d>,
    afm0: Option<Afm>,
    head_res: ResBlock,
    head_out: Conv2d,
}

impl LowLightNet {
    pub fn new(s: &Scope, cfg: &LlmConfig) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let blocks = |s: &Scope| -> Result<Vec<ResBlock>> {
            (0..cfg.resblocks)
                .map(|i| ResBlock::new(&s.pp(format!("res{i}")), c))
                .collect()
        };
        let full = s.pp("full");
        let conv_in = Conv2d::new(&full.pp("conv_in"), 3, c, 3)?;
        let res = blocks(&full)?;
        let conv_mid = Conv2d::new(&full.pp("conv_mid"), c, c, 3)?;
        let cbam = Cbam::new(&full.pp("cbam"), c, cfg.cbam_reduction)?;
        let mut branches = Vec::new();
        for k in 1..cfg.scales {
            let b = s.pp(format!("s{k}"));
            branches.push(LowerBranch {
                sfm1: Conv2d::new(&b.pp("sfm.conv1"), 3, c, 3)?,
                sfm2: Conv2d::new(&b.pp("sfm.conv2"), c, c, 3)?,
                down: Conv2d::strided(&b.pp("down"), c, c, 3, 2)?,
                enc: blocks(&b)?,
                fem: Conv2d::new(&b.pp("fem"), 2 * c, c, 1)?,
                cfm: Conv2d::new(&b.pp("cfm"), cfg.scales * c, c, 1)?,
                afm: Afm::new(&b.pp("afm"), 2 * c, c, cfg.afm_reduction)?,
                dec: ResBlock::new(&b.pp("dec"), c)?,
            });
        }
        let fcm = (0..cfg.scales - 1)
            .map(|k| Conv2d::new(&s.pp(format!("fcm{k}")), c, c, 3))
            .collect::<Result<_>>()?;
        let afm0 = if cfg.scales > 1 {
            Some(Afm::new(&s.pp("afm0"), 2 * c, c, cfg.afm_reduction)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            conv_in,
            res,
            conv_mid,
            cbam,
            branches,
            fcm,
            afm0,
            head_res: ResBlock::new(&s.pp("head.res"), c)?,
            head_out: Conv2d::new(&s.pp("head.out"), c, 3, 3)?,
        })
    }

    pub fn from_params(params: &NetworkParams) -> Result<Self> {
        match &params.arch {
            ArchDescriptor::LowLight(cfg) => Self::new(&params.store.root(), cfg),
            other => Err(arch_mismatch("llm", other)),
        }
    }

    pub fn config(&self) -> &LlmConfig {
        &self.cfg
    }

    fn full_features(&self, x: &Tensor) -> Result<Tensor> {
        let mut f = self.conv_in.forward(x)?.relu()?;
        for r in &self.res {
            f = r.forward(&f)?;
        }
        self.conv_mid.forward(&f)
    }

    /// Forward on a `(B, 3, H, W)` tensor whose sides are multiples of
    /// [`LlmConfig::size_multiple`].
    pub fn forward_aligned(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, 3, "low-light module")?;
        let scales = self.cfg.scales;
        let enc0 = self.full_features(x)?;
        let g0 = self.cbam.forward(&enc0)?;
        check_block(&g0, "full-scale branch")?;

        let mut enc = vec![enc0];
        for b in &self.branches {
            let mut e = b.down.forward(enc.last().unwrap())?.relu()?;
            for r in &b.enc {
                e = r.forward(&e)?;
            }
            enc.push(e);
        }

        let mut fused = Vec::with_capacity(scales - 1);
        for (i, b) in self.branches.iter().enumerate() {
            let k = i + 1;
            let img = ops::avg_pool(x, 1 << k)?;
            let sfm = b.sfm2.forward(&b.sfm1.forward(&img)?.relu()?)?.relu()?;
            let fem = b.fem.forward(&Tensor::cat(&[&sfm, &enc[k]], 1)?)?.relu()?;
            let resized = enc
                .iter()
                .enumerate()
                .map(|(j, e)| {
                    if j < k {
                        ops::avg_pool(e, 1 << (k - j))
                    } else {
                        ops::upsample(e, 1 << (j - k))
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let cfm = b.cfm.forward(&Tensor::cat(&resized, 1)?)?;
            fused.push(Tensor::cat(&[&fem, &cfm], 1)?);
        }

        let mut dec: Option<Tensor> = None;
        for (i, b) in self.branches.iter().enumerate().rev() {
            let k = i + 1;
            let mut a = b.afm.forward(&fused[i])?;
            if let Some(d) = &dec {
                a = (a + self.fcm[k].forward(&ops::upsample(d, 2)?)?.relu()?)?;
            }
            let d = b.dec.forward(&a)?;
            check_block(&d, "downscaled branch")?;
            dec = Some(d);
        }

        let h = match (&self.afm0, &dec) {
            (Some(afm0), Some(d)) => {
                let fcm = self.fcm[0].forward(&ops::upsample(d, 2)?)?.relu()?;
                afm0.forward(&Tensor::cat(&[&g0, &fcm], 1)?)?
            }
            _ => g0,
        };
        let out = self.head_out.forward(&self.head_res.forward(&h)?)?;
        ops::sigmoid(&out)
    }

    /// Forward on any `(B, 3, H, W)` tensor: reflect-pads to the required
    /// multiple and crops the result back.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::validate_input(x, "low-light input")?;
        let (padded, (h, w)) = ops::pad_to_multiple(x, self.cfg.size_multiple())?;
        let y = self.forward_aligned(&padded)?;
        ops::crop_to(&y, h, w)
    }

    /// Channel and spatial attention maps of the full-scale CBAM.
    pub fn attention_maps(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (padded, _) = ops::pad_to_multiple(x, self.cfg.size_multiple())?;
        let f = self.full_features(&padded)?;
        let ch = self.cbam.channel.weights(&f)?;
        let gated = f.broadcast_mul(&ch)?;
        let sp = self.cbam.spatial.weights(&gated)?;
        Ok((ch, sp))
    }
}

fn check_block(x: &Tensor, what: &str) -> Result<()> {
    if cfg!(debug_assertions) {
        ops::ensure_finite(x, what)?;
    }
    Ok(())
}

/// Fresh low-light parameters with the default layout at the given size.
pub fn llm_init(scales: usize, base_channels: usize, seed: u64) -> Result<NetworkParams> {
    let cfg = LlmConfig {
        scales,
        base_channels,
        ..LlmConfig::default()
    };
    llm_init_with(&cfg, seed, DType::F32)
}

pub fn llm_init_with(cfg: &LlmConfig, seed: u64, dtype: DType) -> Result<NetworkParams> {
    let store = VarStore::initializing(seed, dtype);
    LowLightNet::new(&store.root(), cfg)?;
    Ok(NetworkParams::new(ArchDescriptor::LowLight(cfg.clone()), store))
}

/// Enhances one image. Output has the input's dimensions and lies in `[0, 1]`.
pub fn llm_forward(img: &ImageRgb, params: &NetworkParams) -> Result<ImageRgb> {
    let net = LowLightNet::from_params(params)?;
    let x = img.to_tensor(params.dtype(), params.store.device())?;
    ImageRgb::from_tensor(&net.forward(&x)?)
}
