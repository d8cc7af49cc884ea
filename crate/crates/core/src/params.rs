//! Serializable parameter sets with their architecture descriptors.

use candle_core::DType;
use serde::{Deserialize, Serialize};

use crate::dhm::{DhmConfig, DiscConfig};
use crate::error::{Error, Result};
use crate::llm::LlmConfig;
use crate::nn::{checkpoint::FORMAT_VERSION, Checkpoint, VarStore};

/// Which network a parameter set belongs to, with everything needed to
/// derive its weight shapes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "network", rename_all = "snake_case")]
pub enum ArchDescriptor {
    LowLight(LlmConfig),
    DehazeUpper(DhmConfig),
    DehazeLower(DhmConfig),
    DehazeHead(DhmConfig),
    Discriminator(DiscConfig),
}

impl ArchDescriptor {
    pub fn kind(&self) -> &'static str {
        match self {
            ArchDescriptor::LowLight(_) => "llm",
            ArchDescriptor::DehazeUpper(_) => "dhm_upper",
            ArchDescriptor::DehazeLower(_) => "dhm_lower",
            ArchDescriptor::DehazeHead(_) => "dhm_head",
            ArchDescriptor::Discriminator(_) => "disc",
        }
    }
}

#[derive(Clone, Debug)]
pub struct NetworkParams {
    pub arch: ArchDescriptor,
    pub store: VarStore,
    pub version: u32,
}

impl NetworkParams {
    pub fn new(arch: ArchDescriptor, store: VarStore) -> Self {
        store.freeze();
        Self {
            arch,
            store,
            version: FORMAT_VERSION,
        }
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn parameter_count(&self) -> usize {
        self.store.parameter_count()
    }

    /// Same weights converted to `dtype` (f64 for gradient checks).
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            arch: self.arch.clone(),
            store: VarStore::frozen(self.store.tensors(), dtype)?,
            version: self.version,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        Ok(Checkpoint {
            kind: self.arch.kind().to_string(),
            version: self.version,
            arch: serde_json::to_value(&self.arch)?,
            tensors: self.store.tensors(),
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch: ArchDescriptor = serde_json::from_value(ck.arch.clone())
            .map_err(|e| Error::Checkpoint(format!("{} checkpoint has no single-network descriptor: {e}", ck.kind)))?;
        ck.expect_kind(arch.kind())?;
        let dtype = ck.tensors.values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
        Ok(Self {
            arch,
            store: VarStore::frozen(ck.tensors.clone(), dtype)?,
            version: ck.version,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Bitwise equality of architecture and every weight.
    pub fn bit_equal(&self, other: &Self) -> Result<bool> {
        if self.arch != other.arch {
            return Ok(false);
        }
        tensors_bit_equal(&self.store.tensors(), &other.store.tensors())
    }
}

pub(crate) fn tensors_bit_equal(
    a: &std::collections::BTreeMap<String, candle_core::Tensor>,
    b: &std::collections::BTreeMap<String, candle_core::Tensor>,
) -> Result<bool> {
    if a.len() != b.len() {
        return Ok(false);
    }
    for (k, ta) in a {
        let Some(tb) = b.get(k) else { return Ok(false) };
        if ta.dims() != tb.dims() || ta.dtype() != tb.dtype() {
            return Ok(false);
        }
        let va: Vec<f64> = ta.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        let vb: Vec<f64> = tb.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
        if va.iter().zip(&vb).any(|(x, y)| x.to_bits() != y.to_bits()) {
            return Ok(false);
        }
    }
    Ok(true)
}

pub(crate) fn arch_mismatch(expected: &str, got: &ArchDescriptor) -> Error {
    Error::Checkpoint(format!("expected {expected} parameters, got {}", got.kind()))
}
