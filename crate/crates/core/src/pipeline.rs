//! End-to-end inference: low-light module, dehazing module, contrast
//! enhancement and optional retinex blending.

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use crate::dhm::{DehazeNet, DhmParams};
use crate::emsr::{blend, contrast_enhance, emsr_apply, RetinexConfig};
use crate::error::Result;
use crate::image::ImageRgb;
use crate::llm::LowLightNet;
use crate::params::NetworkParams;

/// Default weight of the retinex image in the final blend.
pub const DEFAULT_ALPHA: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferOptions {
    pub use_emsr: bool,
    pub alpha: f64,
    pub retinex: RetinexConfig,
    /// Contrast stretch after the networks.
    pub enhance: bool,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            use_emsr: false,
            alpha: DEFAULT_ALPHA,
            retinex: RetinexConfig::default(),
            enhance: true,
        }
    }
}

/// Every intermediate of one inference pass.
#[derive(Clone, Debug)]
pub struct Stages {
    pub llm: ImageRgb,
    pub dhm: ImageRgb,
    pub enhanced: ImageRgb,
    pub emsr: Option<ImageRgb>,
    pub output: ImageRgb,
}

struct Net<T> {
    net: T,
    dtype: DType,
}

/// Assembled networks. A missing network is a passthrough, which is how the
/// single-module ablation rows and the identity test mode are expressed.
pub struct Pipeline {
    llm: Option<Net<LowLightNet>>,
    dhm: Option<Net<DehazeNet>>,
}

impl Pipeline {
    pub fn new(llm: Option<&NetworkParams>, dhm: Option<&DhmParams>) -> Result<Self> {
        Ok(Self {
            llm: llm
                .map(|p| -> Result<_> {
                    Ok(Net {
                        net: LowLightNet::from_params(p)?,
                        dtype: p.dtype(),
                    })
                })
                .transpose()?,
            dhm: dhm
                .map(|p| -> Result<_> {
                    Ok(Net {
                        net: DehazeNet::from_params(p)?,
                        dtype: p.dtype(),
                    })
                })
                .transpose()?,
        })
    }

    /// Both networks replaced by the identity map.
    pub fn identity() -> Self {
        Self { llm: None, dhm: None }
    }

    pub fn run_llm(&self, img: &ImageRgb) -> Result<ImageRgb> {
        match &self.llm {
            Some(n) => ImageRgb::from_tensor(&n.net.forward(&img.to_tensor(n.dtype, &Device::Cpu)?)?),
            None => Ok(img.clone()),
        }
    }

    pub fn run_dhm(&self, img: &ImageRgb) -> Result<ImageRgb> {
        match &self.dhm {
            Some(n) => ImageRgb::from_tensor(&n.net.forward(&img.to_tensor(n.dtype, &Device::Cpu)?)?),
            None => Ok(img.clone()),
        }
    }

    /// Network output before any post-processing.
    pub fn base(&self, img: &ImageRgb) -> Result<ImageRgb> {
        self.run_dhm(&self.run_llm(img)?)
    }

    pub fn stages(&self, img: &ImageRgb, opts: &InferOptions) -> Result<Stages> {
        let llm = self.run_llm(img)?;
        let dhm = self.run_dhm(&llm)?;
        let enhanced = if opts.enhance {
            contrast_enhance(&dhm)?
        } else {
            dhm.clone()
        };
        let (emsr, output) = if opts.use_emsr {
            let r = emsr_apply(&enhanced, &opts.retinex)?;
            let out = blend(&enhanced, &r, opts.alpha)?;
            (Some(r), out)
        } else {
            (None, enhanced.clone())
        };
        Ok(Stages {
            llm,
            dhm,
            enhanced,
            emsr,
            output,
        })
    }

    pub fn run(&self, img: &ImageRgb, opts: &InferOptions) -> Result<ImageRgb> {
        Ok(self.stages(img, opts)?.output)
    }
}

/// Full pipeline with both trained networks.
pub fn ndels_infer(
    img: &ImageRgb,
    llm: &NetworkParams,
    dhm: &DhmParams,
    cfg: &RetinexConfig,
    use_emsr: bool,
    alpha: f64,
) -> Result<ImageRgb> {
    let opts = InferOptions {
        use_emsr,
        alpha,
        retinex: cfg.clone(),
        enhance: true,
    };
    Pipeline::new(Some(llm), Some(dhm))?.run(img, &opts)
}
