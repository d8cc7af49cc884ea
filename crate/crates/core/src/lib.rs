//! Nighttime dehazing, low-light enhancement and light suppression.
//!
//! The pipeline runs a low-light network (dark-hazy → bright-hazy), a
//! two-branch dehazing network (bright-hazy → bright), a percentile contrast
//! stretch and, optionally, an extended multiscale retinex image blended
//! back in. Training data are synthesized from aligned day/night pairs.
//!
//! ```no_run
//! use ndels::prelude::*;
//!
//! # fn main() -> ndels::Result<()> {
//! let img = ImageRgb::load("night.png")?;
//! let llm = NetworkParams::load("runs/llm/epoch_42.ckpt".as_ref())?;
//! let dhm = DhmParams::load("runs/dhm/epoch_42.ckpt".as_ref())?;
//! let out = ndels_infer(&img, &llm, &dhm, &RetinexConfig::default(), true, 0.5)?;
//! out.save("night_out.png")?;
//! # Ok(())
//! # }
//! ```

pub mod cli;
pub mod dhm;
pub mod emsr;
pub mod error;
pub mod image;
pub mod io;
pub mod llm;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod params;
pub mod pipeline;
pub mod seeds;
pub mod synth;
pub mod train;

pub use error::{Error, Result};

pub mod prelude {
    pub use crate::dhm::{dhm_forward, dhm_init, disc_forward, disc_init, DhmConfig, DhmParams, DiscConfig};
    pub use crate::emsr::{blend, contrast_enhance, emsr_apply, RetinexConfig};
    pub use crate::error::{Error, Result};
    pub use crate::image::ImageRgb;
    pub use crate::llm::{llm_forward, llm_init, llm_init_with, LlmConfig};
    pub use crate::losses::LossWeights;
    pub use crate::metrics::{ms_ssim, psnr, ssim, QualityReport};
    pub use crate::params::NetworkParams;
    pub use crate::pipeline::{ndels_infer, InferOptions, Pipeline};
    pub use crate::synth::{add_haze, augment, composite_pair, enhance_bright, make_triplet, HazeParams, ImageTriplet};
    pub use crate::train::{lr_at, train_dhm, train_llm, TrainConfig};
}
