//! Training configuration, learning-rate schedule, optimizer, training loops
//! and evaluation.

mod adam;
mod eval;
mod loops;

pub use adam::{Adam, AdamConfig};
pub use eval::{
    ablate, contact_sheet, evaluate, AblationCell, AblationGrid, EvalReport, ABLATION_COLUMNS, ABLATION_ROWS,
};
pub use loops::{train_dhm, train_llm, EpochLog, Module, RunOptions, TrainReport, TrainState};

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dhm::{DhmConfig, DiscConfig};
use crate::error::{Error, Result};
use crate::llm::LlmConfig;
use crate::losses::{ExtractorConfig, LossWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Run directory name under the output root.
    pub name: String,
    pub seed: u64,
    pub initial_lr: f64,
    /// Epochs between learning-rate decays.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub total_epochs: usize,
    /// Square training crop side.
    pub crop: usize,
    /// Working size `[width, height]` before cropping.
    pub resize: [usize; 2],
    /// Random crop position, rotation and flip; off means a centre crop.
    pub augment: bool,
    pub batch_size: usize,
    /// Falls back to the module's defaults when absent.
    pub loss_weights: Option<LossWeights>,
    pub adam: AdamConfig,
    /// Initial discriminator learning rate, decayed on the generator's
    /// schedule; the generator rate when absent.
    pub disc_lr: Option<f64>,
    pub extractor: ExtractorConfig,
    /// Consecutive saturated discriminator steps before a collapse warning.
    pub collapse_patience: usize,
    pub llm: LlmConfig,
    pub dhm: DhmConfig,
    pub disc: DiscConfig,
    /// Optional pretrained upper-branch weights for the dehazing module.
    pub upper_pretrained: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            seed: 0,
            initial_lr: 1e-4,
            decay_every: 14,
            decay_factor: 10.0,
            total_epochs: 42,
            crop: 256,
            resize: [512, 256],
            augment: true,
            batch_size: 4,
            loss_weights: None,
            adam: AdamConfig::default(),
            disc_lr: None,
            extractor: ExtractorConfig::default(),
            collapse_patience: 50,
            llm: LlmConfig::default(),
            dhm: DhmConfig::default(),
            disc: DiscConfig::default(),
            upper_pretrained: None,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: &str| Err(Error::Config(format!("field `{field}`: {why}")));
        if !(self.initial_lr >= 0.0 && self.initial_lr.is_finite()) {
            return bad("initial_lr", "must be finite and non-negative");
        }
        if self.decay_every == 0 {
            return bad("decay_every", "must be >= 1");
        }
        if !(self.decay_factor >= 1.0 && self.decay_factor.is_finite()) {
            return bad("decay_factor", "must be >= 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be >= 1");
        }
        if self.crop == 0 || self.crop > self.resize[0].min(self.resize[1]) {
            return bad("crop", "must be positive and fit inside `resize`");
        }
        if let Some(w) = &self.loss_weights {
            w.validate().or_else(|e| bad("loss_weights", &e.to_string()))?;
        }
        if let Some(lr) = self.disc_lr {
            if !(lr >= 0.0 && lr.is_finite()) {
                return bad("disc_lr", "must be finite and non-negative");
            }
        }
        self.adam.validate().or_else(|e| bad("adam", &e.to_string()))?;
        self.llm.validate().or_else(|e| bad("llm", &e.to_string()))?;
        self.dhm.validate().or_else(|e| bad("dhm", &e.to_string()))?;
        Ok(())
    }

    pub fn weights_for(&self, module: Module) -> LossWeights {
        self.loss_weights.unwrap_or(match module {
            Module::Llm => LossWeights::llm_default(),
            Module::Dhm => LossWeights::dhm_default(),
        })
    }
}

/// Stepped decay: `initial_lr / decay_factor^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(Error::Domain(format!(
            "epoch {epoch} outside the schedule of {} epochs",
            cfg.total_epochs
        )));
    }
    let k = (epoch / cfg.decay_every) as i32;
    Ok(cfg.initial_lr / cfg.decay_factor.powi(k))
}
