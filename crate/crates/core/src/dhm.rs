//! Dehazing module and discriminator.
//!
//! The dehazing generator has two branches evaluated on the same input:
//!
//! * **upper**: a multi-scale residual (Res2Net-style) encoder with five
//!   stride-2 stages, a decoder built from feature-attention blocks and
//!   sub-pixel (depth-to-space) upscaling with encoder skips, and an
//!   enhancement tail that fuses pooled context at ×2/×4/×8;
//! * **lower**: a full-resolution chain of residual channel attention
//!   modules (RCAM), each a stack of RCABs wrapped by a long skip.
//!
//! Their outputs are concatenated, fused by one 3×3 convolution, passed
//! through `tanh` and mapped affinely from `[-1, 1]` to `[0, 1]`.
//!
//! The discriminator is a stack of stride-2 3×3 convolutions (batch norm +
//! leaky ReLU) up to 512 channels, adaptive average pooling to 1×1, 1×1
//! convolutions to 1024 and 1 channels, and a sigmoid.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageRgb;
use crate::nn::layers::expect_channels;
use crate::nn::{ops, BatchNorm, ChannelGate, Checkpoint, Conv2d, Padding, Scope, VarStore};
use crate::params::{arch_mismatch, ArchDescriptor, NetworkParams};
use crate::seeds::sub_seed;

/// Spatial reduction of the upper branch encoder.
pub const UPPER_STRIDE: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DhmConfig {
    /// Widths of the five encoder stages (each divisible by 4).
    pub upper_channels: Vec<usize>,
    /// Channels leaving the upper branch at full resolution.
    pub upper_out: usize,
    pub lower_width: usize,
    pub rcams: usize,
    pub rcabs_per_rcam: usize,
    pub rcab_reduction: usize,
    pub fa_reduction: usize,
}

impl Default for DhmConfig {
    fn default() -> Self {
        Self {
            upper_channels: vec![16, 32, 64, 64, 64],
            upper_out: 16,
            lower_width: 64,
            rcams: 2,
            rcabs_per_rcam: 4,
            rcab_reduction: 16,
            fa_reduction: 8,
        }
    }
}

impl DhmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.upper_channels.len() != 5 {
            return Err(Error::Config("upper branch needs exactly 5 stage widths".into()));
        }
        if self.upper_channels.iter().any(|&c| c == 0 || c % 4 != 0) {
            return Err(Error::Config(
                "upper stage widths must be positive multiples of 4".into(),
            ));
        }
        if self.upper_out == 0 || self.lower_width == 0 {
            return Err(Error::Config("branch widths must be positive".into()));
        }
        if self.rcab_reduction == 0 || self.fa_reduction == 0 {
            return Err(Error::Config("attention reductions must be >= 1".into()));
        }
        Ok(())
    }
}

/// Image-level feature map `(1, C, H, W)`.
#[derive(Clone, Debug)]
pub struct FeatureMap(Tensor);

impl FeatureMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::Shape(format!("feature map must be NCHW, got {:?}", t.dims())));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn channels(&self) -> usize {
        self.0.dims()[1]
    }

    pub fn is_finite(&self) -> Result<bool> {
        Ok(ops::ensure_finite(&self.0, "feature map").is_ok())
    }
}

// ---------------------------------------------------------------------------
// Upper branch

/// Hierarchical residual block with four channel groups.
#[derive(Clone, Debug)]
struct Res2Block {
    reduce: Conv2d,
    convs: Vec<Conv2d>,
    expand: Conv2d,
    group: usize,
}

impl Res2Block {
    fn new(s: &Scope, c: usize) -> Result<Self> {
        let group = c / 4;
        Ok(Self {
            reduce: Conv2d::new(&s.pp("reduce"), c, c, 1)?,
            convs: (1..4)
                .map(|i| Conv2d::new(&s.pp(format!("k{i}")), group, group, 3))
                .collect::<Result<_>>()?,
            expand: Conv2d::build(&s.pp("expand"), c, c, 1, 1, Padding::Zeros, 0.5)?,
            group,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = self.reduce.forward(x)?.relu()?;
        let g = self.group;
        let mut parts = vec![r.narrow(1, 0, g)?];
        let mut prev: Option<Tensor> = None;
        for (i, conv) in self.convs.iter().enumerate() {
            let xi = r.narrow(1, (i + 1) * g, g)?;
            let input = match &prev {
                Some(p) => (xi + p)?,
                None => xi,
            };
            let y = conv.forward(&input)?.relu()?;
            parts.push(y.clone());
            prev = Some(y);
        }
        let y = self.expand.forward(&Tensor::cat(&parts, 1)?)?;
        Ok((x + y)?.relu()?)
    }
}

/// Feature attention: residual conv pair, channel attention, pixel attention.
#[derive(Clone, Debug)]
struct FaBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    ca: ChannelGate,
    pa1: Conv2d,
    pa2: Conv2d,
}

impl FaBlock {
    fn new(s: &Scope, c: usize, reduction: usize) -> Result<Self> {
        let hidden = (c / reduction).max(1);
        Ok(Self {
            conv1: Conv2d::new(&s.pp("conv1"), c, c, 3)?,
            conv2: Conv2d::build(&s.pp("conv2"), c, c, 3, 1, Padding::Zeros, 0.5)?,
            ca: ChannelGate::new(&s.pp("ca"), c, reduction, false)?,
            pa1: Conv2d::new(&s.pp("pa1"), c, hidden, 1)?,
            pa2: Conv2d::new(&s.pp("pa2"), hidden, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let r = (self.conv1.forward(x)?.relu()? + x)?;
        let r = self.conv2.forward(&r)?;
        let r = self.ca.forward(&r)?;
        let pa = ops::sigmoid(&self.pa2.forward(&self.pa1.forward(&r)?.relu()?)?)?;
        Ok((r.broadcast_mul(&pa)? + x)?)
    }
}

/// 3×3 conv to `4·cout` channels followed by ×2 depth-to-space.
#[derive(Clone, Debug)]
struct SubPixelUp {
    conv: Conv2d,
}

impl SubPixelUp {
    fn new(s: &Scope, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&s.pp("conv"), cin, 4 * cout, 3)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::pixel_shuffle(&self.conv.forward(x)?, 2)
    }
}

/// Pooled-context enhancement tail.
#[derive(Clone, Debug)]
struct EnhanceTail {
    pools: Vec<(usize, Conv2d)>,
    fuse: Conv2d,
    out: Conv2d,
}

impl EnhanceTail {
    const POOLS: [usize; 3] = [2, 4, 8];

    fn new(s: &Scope, c: usize) -> Result<Self> {
        let pools = Self::POOLS
            .iter()
            .map(|&k| Ok((k, Conv2d::new(&s.pp(format!("pool{k}")), c, 1, 1)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            pools,
            fuse: Conv2d::new(&s.pp("fuse"), c + Self::POOLS.len(), c, 3)?,
            out: Conv2d::new(&s.pp("out"), c, c, 3)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut parts = vec![x.clone()];
        for (k, conv) in &self.pools {
            let ctx = conv.forward(&ops::avg_pool(x, *k)?)?.relu()?;
            parts.push(ops::upsample(&ctx, *k)?);
        }
        let t = self.fuse.forward(&Tensor::cat(&parts, 1)?)?.relu()?;
        self.out.forward(&t)
    }
}

#[derive(Clone, Debug)]
pub struct UpperBranch {
    stem: Conv2d,
    down: Vec<Conv2d>,
    blocks: Vec<Res2Block>,
    bottleneck: FaBlock,
    ups: Vec<SubPixelUp>,
    merges: Vec<Conv2d>,
    attn: Vec<FaBlock>,
    final_up: SubPixelUp,
    tail: EnhanceTail,
}

impl UpperBranch {
    pub fn new(s: &Scope, cfg: &DhmConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.upper_channels;
        let stem = Conv2d::strided(&s.pp("stem"), 3, ch[0], 3, 2)?;
        let down = (1..5)
            .map(|i| Conv2d::strided(&s.pp(format!("down{i}")), ch[i - 1], ch[i], 3, 2))
            .collect::<Result<_>>()?;
        let blocks = (0..5)
            .map(|i| Res2Block::new(&s.pp(format!("enc{i}")), ch[i]))
            .collect::<Result<_>>()?;
        let bottleneck = FaBlock::new(&s.pp("bottleneck"), ch[4], cfg.fa_reduction)?;
        let mut ups = Vec::new();
        let mut merges = Vec::new();
        let mut attn = Vec::new();
        for i in (0..4).rev() {
            ups.push(SubPixelUp::new(&s.pp(format!("up{i}")), ch[i + 1], ch[i])?);
            merges.push(Conv2d::new(&s.pp(format!("merge{i}")), 2 * ch[i], ch[i], 1)?);
            attn.push(FaBlock::new(&s.pp(format!("fa{i}")), ch[i], cfg.fa_reduction)?);
        }
        Ok(Self {
            stem,
            down,
            blocks,
            bottleneck,
            ups,
            merges,
            attn,
            final_up: SubPixelUp::new(&s.pp("final_up"), ch[0], cfg.upper_out)?,
            tail: EnhanceTail::new(&s.pp("tail"), cfg.upper_out)?,
        })
    }

    /// Input sides must be multiples of [`UPPER_STRIDE`].
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut e = self.blocks[0].forward(&self.stem.forward(x)?.relu()?)?;
        let mut skips = vec![e.clone()];
        for (i, down) in self.down.iter().enumerate() {
            e = self.blocks[i + 1].forward(&down.forward(&e)?.relu()?)?;
            skips.push(e.clone());
        }
        let mut d = self.bottleneck.forward(&e)?;
        for (j, ((up, merge), fa)) in self.ups.iter().zip(&self.merges).zip(&self.attn).enumerate() {
            let i = 3 - j;
            let u = up.forward(&d)?;
            let m = merge.forward(&Tensor::cat(&[&u, &skips[i]], 1)?)?.relu()?;
            d = fa.forward(&m)?;
        }
        let full = self.final_up.forward(&d)?;
        self.tail.forward(&full)
    }
}

// ---------------------------------------------------------------------------
// Lower branch

/// Residual channel attention block: conv, ReLU, conv, channel gate, identity skip.
#[derive(Clone, Debug)]
pub struct Rcab {
    conv1: Conv2d,
    conv2: Conv2d,
    gate: ChannelGate,
    channels: usize,
}

impl Rcab {
    pub fn new(s: &Scope, channels: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::new(&s.pp("conv1"), channels, channels, 3)?,
            conv2: Conv2d::build(&s.pp("conv2"), channels, channels, 3, 1, Padding::Zeros, 0.1)?,
            gate: ChannelGate::new(&s.pp("ca"), channels, reduction, false)?,
            channels,
        })
    }

    fn residual(&self, x: &Tensor) -> Result<Tensor> {
        self.conv2.forward(&self.conv1.forward(x)?.relu()?)
    }

    /// Channel-attention gate values for the residual of `x`.
    pub fn gate_values(&self, x: &Tensor) -> Result<Tensor> {
        self.gate.weights(&self.residual(x)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, self.channels, "RCAB")?;
        let r = self.gate.forward(&self.residual(x)?)?;
        Ok((x + r)?)
    }
}

/// Applies one RCAB to a feature map.
pub fn rcab_forward(f: &FeatureMap, block: &Rcab) -> Result<FeatureMap> {
    FeatureMap::new(block.forward(f.tensor())?)
}

/// RCABs followed by a 3×3 conv, wrapped by a long skip.
#[derive(Clone, Debug)]
pub struct Rcam {
    pub blocks: Vec<Rcab>,
    tail: Conv2d,
}

impl Rcam {
    pub fn new(s: &Scope, channels: usize, count: usize, reduction: usize) -> Result<Self> {
        Ok(Self {
            blocks: (0..count)
                .map(|i| Rcab::new(&s.pp(format!("rcab{i}")), channels, reduction))
                .collect::<Result<_>>()?,
            tail: Conv2d::build(&s.pp("tail"), channels, channels, 3, 1, Padding::Zeros, 0.1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut y = x.clone();
        for b in &self.blocks {
            y = b.forward(&y)?;
        }
        Ok((x + self.tail.forward(&y)?)?)
    }
}

#[derive(Clone, Debug)]
pub struct LowerBranch {
    head: Conv2d,
    pub modules: Vec<Rcam>,
}

impl LowerBranch {
    pub fn new(s: &Scope, cfg: &DhmConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            head: Conv2d::new(&s.pp("head"), 3, cfg.lower_width, 3)?,
            modules: (0..cfg.rcams)
                .map(|i| {
                    Rcam::new(
                        &s.pp(format!("rcam{i}")),
                        cfg.lower_width,
                        cfg.rcabs_per_rcam,
                        cfg.rcab_reduction,
                    )
                })
                .collect::<Result<_>>()?,
        })
    }

    /// The RCAM chain applied to already-lifted features.
    pub fn body(&self, f: &Tensor) -> Result<Tensor> {
        let mut y = f.clone();
        for m in &self.modules {
            y = m.forward(&y)?;
        }
        Ok(y)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let f = self.head.forward(x)?;
        let y = self.body(&f)?;
        if cfg!(debug_assertions) {
            ops::ensure_finite(&y, "lower branch")?;
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct FusionHead {
    conv: Conv2d,
}

impl FusionHead {
    pub fn new(s: &Scope, cfg: &DhmConfig) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(&s.pp("conv"), cfg.upper_out + cfg.lower_width, 3, 3)?,
        })
    }

    pub fn forward(&self, upper: &Tensor, lower: &Tensor) -> Result<Tensor> {
        let y = self.conv.forward(&Tensor::cat(&[upper, lower], 1)?)?.tanh()?;
        Ok(y.affine(0.5, 0.5)?)
    }
}

/// The three parameter sets of the dehazing generator.
#[derive(Clone, Debug)]
pub struct DhmParams {
    pub upper_branch: NetworkParams,
    pub lower_branch: NetworkParams,
    pub head: NetworkParams,
}

impl DhmParams {
    pub fn config(&self) -> Result<&DhmConfig> {
        match &self.upper_branch.arch {
            ArchDescriptor::DehazeUpper(cfg) => Ok(cfg),
            other => Err(arch_mismatch("dhm_upper", other)),
        }
    }

    pub fn dtype(&self) -> DType {
        self.upper_branch.dtype()
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            upper_branch: self.upper_branch.to_dtype(dtype)?,
            lower_branch: self.lower_branch.to_dtype(dtype)?,
            head: self.head.to_dtype(dtype)?,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.upper_branch.parameter_count() + self.lower_branch.parameter_count() + self.head.parameter_count()
    }

    fn parts(&self) -> [(&'static str, &NetworkParams); 3] {
        [
            ("upper", &self.upper_branch),
            ("lower", &self.lower_branch),
            ("head", &self.head),
        ]
    }

    /// One container, sub-networks under `upper.`, `lower.` and `head.`.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut tensors = std::collections::BTreeMap::new();
        for (ns, p) in self.parts() {
            for (k, t) in p.store.tensors() {
                tensors.insert(format!("{ns}.{k}"), t);
            }
        }
        Ok(Checkpoint {
            kind: "dhm".into(),
            version: self.upper_branch.version,
            arch: serde_json::to_value(self.config()?)?,
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind("dhm")?;
        let cfg: DhmConfig = serde_json::from_value(ck.arch.clone())?;
        let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        let part = |ns: &str, arch: ArchDescriptor| -> Result<NetworkParams> {
            Ok(NetworkParams {
                arch,
                store: VarStore::frozen(ck.namespace(ns), dtype)?,
                version: ck.version,
            })
        };
        let params = Self {
            upper_branch: part("upper", ArchDescriptor::DehazeUpper(cfg.clone()))?,
            lower_branch: part("lower", ArchDescriptor::DehazeLower(cfg.clone()))?,
            head: part("head", ArchDescriptor::DehazeHead(cfg))?,
        };
        // fail early on missing or mis-shaped tensors
        DehazeNet::from_params(&params)?;
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Overwrites upper-branch weights from a pretrained file. Accepts either a
    /// dehazing checkpoint (uses its `upper.` namespace) or a plain safetensors
    /// file whose names match the upper branch.
    pub fn load_upper_pretrained(&self, path: &Path) -> Result<usize> {
        let tensors = match Checkpoint::load(path) {
            Ok(ck) if ck.kind == "dhm" => ck.namespace("upper"),
            Ok(ck) => ck.tensors,
            Err(_) => candle_core::safetensors::load(path, &candle_core::Device::Cpu)?
                .into_iter()
                .collect(),
        };
        let mut loaded = 0;
        for (name, t) in tensors {
            let name = name.strip_prefix("upper.").unwrap_or(&name).to_string();
            if self.upper_branch.store.get_var(&name).is_some() {
                self.upper_branch.store.set(&name, &t)?;
                loaded += 1;
            }
        }
        if loaded == 0 {
            return Err(Error::Checkpoint(format!(
                "{} holds no upper-branch weights",
                path.display()
            )));
        }
        Ok(loaded)
    }

    pub fn bit_equal(&self, other: &Self) -> Result<bool> {
        Ok(self.upper_branch.bit_equal(&other.upper_branch)?
            && self.lower_branch.bit_equal(&other.lower_branch)?
            && self.head.bit_equal(&other.head)?)
    }
}

/// Assembled dehazing generator.
#[derive(Clone, Debug)]
pub struct DehazeNet {
    pub upper: UpperBranch,
    pub lower: LowerBranch,
    pub head: FusionHead,
}

impl DehazeNet {
    pub fn from_params(p: &DhmParams) -> Result<Self> {
        let cfg = p.config()?;
        Ok(Self {
            upper: UpperBranch::new(&p.upper_branch.store.root(), cfg)?,
            lower: LowerBranch::new(&p.lower_branch.store.root(), cfg)?,
            head: FusionHead::new(&p.head.store.root(), cfg)?,
        })
    }

    /// Input sides must be multiples of [`UPPER_STRIDE`].
    pub fn forward_aligned(&self, x: &Tensor) -> Result<Tensor> {
        expect_channels(x, 3, "dehazing module")?;
        let u = self.upper.forward(x)?;
        let l = self.lower.forward(x)?;
        self.head.forward(&u, &l)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::validate_input(x, "dehazing input")?;
        let (padded, (h, w)) = ops::pad_to_multiple(x, UPPER_STRIDE)?;
        let y = self.forward_aligned(&padded)?;
        ops::crop_to(&y, h, w)
    }
}

pub fn dhm_init(cfg: &DhmConfig, seed: u64, dtype: DType) -> Result<DhmParams> {
    cfg.validate()?;
    let upper = VarStore::initializing(sub_seed(seed, "dhm.upper"), dtype);
    UpperBranch::new(&upper.root(), cfg)?;
    let lower = VarStore::initializing(sub_seed(seed, "dhm.lower"), dtype);
    LowerBranch::new(&lower.root(), cfg)?;
    let head = VarStore::initializing(sub_seed(seed, "dhm.head"), dtype);
    FusionHead::new(&head.root(), cfg)?;
    Ok(DhmParams {
        upper_branch: NetworkParams::new(ArchDescriptor::DehazeUpper(cfg.clone()), upper),
        lower_branch: NetworkParams::new(ArchDescriptor::DehazeLower(cfg.clone()), lower),
        head: NetworkParams::new(ArchDescriptor::DehazeHead(cfg.clone()), head),
    })
}

/// Dehazes one image; output has the input's dimensions and lies in `[0, 1]`.
pub fn dhm_forward(img: &ImageRgb, params: &DhmParams) -> Result<ImageRgb> {
    let net = DehazeNet::from_params(params)?;
    let x = img.to_tensor(params.dtype(), params.upper_branch.store.device())?;
    ImageRgb::from_tensor(&net.forward(&x)?)
}

// ---------------------------------------------------------------------------
// Discriminator

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiscConfig {
    /// Output widths of the stride-2 3×3 stages.
    pub channels: Vec<usize>,
    pub hidden: usize,
}

impl Default for DiscConfig {
    fn default() -> Self {
        Self {
            channels: vec![64, 128, 256, 512, 512],
            hidden: 1024,
        }
    }
}

/// Smallest accepted input side.
pub const DISC_MIN_SIDE: usize = 16;
const LEAKY_SLOPE: f64 = 0.2;

/// Batch-norm behaviour for a discriminator pass.
#[derive(Clone, Copy)]
pub enum BnMode<'a> {
    /// Running statistics.
    Eval,
    /// Batch statistics; running statistics are updated when a store is given.
    Train(Option<&'a VarStore>),
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    stages: Vec<(Conv2d, BatchNorm)>,
    fc1: Conv2d,
    fc2: Conv2d,
}

impl Discriminator {
    pub fn new(s: &Scope, cfg: &DiscConfig) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.hidden == 0 {
            return Err(Error::Config("discriminator needs at least one stage".into()));
        }
        let mut cin = 3;
        let mut stages = Vec::new();
        for (i, &c) in cfg.channels.iter().enumerate() {
            let st = s.pp(format!("stage{i}"));
            let conv = Conv2d::build(&st.pp("conv"), cin, c, 3, 2, Padding::Replicate, 1.0)?;
            stages.push((conv, BatchNorm::new(&st.pp("bn"), c)?));
            cin = c;
        }
        Ok(Self {
            stages,
            fc1: Conv2d::new(&s.pp("fc1"), cin, cfg.hidden, 1)?,
            fc2: Conv2d::new(&s.pp("fc2"), cfg.hidden, 1, 1)?,
        })
    }

    pub fn from_params(p: &NetworkParams) -> Result<Self> {
        match &p.arch {
            ArchDescriptor::Discriminator(cfg) => Self::new(&p.store.root(), cfg),
            other => Err(arch_mismatch("disc", other)),
        }
    }

    /// Pre-sigmoid scores, shape `(B,)`.
    pub fn logits(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("discriminator expects 3 channels, got {c}")));
        }
        if h < DISC_MIN_SIDE || w < DISC_MIN_SIDE {
            return Err(Error::Size(format!(
                "discriminator needs at least {DISC_MIN_SIDE}x{DISC_MIN_SIDE}, got {h}x{w}"
            )));
        }
        let mut y = x.clone();
        for (conv, bn) in &self.stages {
            y = conv.forward(&y)?;
            y = match mode {
                BnMode::Eval => bn.forward_eval(&y)?,
                BnMode::Train(store) => bn.forward_train(&y, store)?,
            };
            y = ops::leaky_relu(&y, LEAKY_SLOPE)?;
        }
        let pooled = ops::global_avg_pool(&y)?;
        let z = ops::leaky_relu(&self.fc1.forward(&pooled)?, LEAKY_SLOPE)?;
        Ok(self.fc2.forward(&z)?.reshape(b)?)
    }

    /// Probabilities in (0, 1), shape `(B,)`.
    pub fn scores(&self, x: &Tensor, mode: BnMode) -> Result<Tensor> {
        ops::sigmoid(&self.logits(x, mode)?)
    }
}

pub fn disc_init(cfg: &DiscConfig, seed: u64, dtype: DType) -> Result<NetworkParams> {
    let store = VarStore::initializing(sub_seed(seed, "disc"), dtype);
    Discriminator::new(&store.root(), cfg)?;
    Ok(NetworkParams::new(ArchDescriptor::Discriminator(cfg.clone()), store))
}

/// Probability that `img` is a real (ground-truth) image, using running statistics.
pub fn disc_forward(img: &ImageRgb, params: &NetworkParams) -> Result<f64> {
    let d = Discriminator::from_params(params)?;
    let x = img.to_tensor(params.dtype(), params.store.device())?;
    ops::scalar(&d.scores(&x, BnMode::Eval)?.squeeze(0)?)
}
