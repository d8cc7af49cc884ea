//! Self-describing checkpoint container.
//!
//! A checkpoint is a safetensors file whose header metadata carries
//! `format`, `version`, `kind` and the JSON-encoded architecture descriptor.
//! Tensors are stored under their full dotted names, so a dehazing checkpoint
//! keeps its sub-networks apart by prefix (`upper.`, `lower.`, `head.`).

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::safetensors::Load;
use candle_core::{Device, Tensor};

use crate::error::{Error, Result};

pub const FORMAT_TAG: &str = "ndels-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Re-emits the JSON header with sorted keys. The metadata goes through a
/// `HashMap`, so without this two saves of the same weights differ in bytes.
fn canonical_header(mut bytes: Vec<u8>) -> Result<Vec<u8>> {
    let n = u64::from_le_bytes(bytes[..8].try_into().expect("8-byte prefix")) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[8..8 + n])?;
    let mut sorted = serde_json::to_vec(&header)?;
    if sorted.len() > n {
        return Err(Error::Checkpoint("canonical header is longer than the original".into()));
    }
    sorted.resize(n, b' ');
    bytes[8..8 + n].copy_from_slice(&sorted);
    Ok(bytes)
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub kind: String,
    pub version: u32,
    pub arch: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut meta = HashMap::new();
        meta.insert("format".to_string(), FORMAT_TAG.to_string());
        meta.insert("version".to_string(), self.version.to_string());
        meta.insert("kind".to_string(), self.kind.clone());
        meta.insert("arch".to_string(), serde_json::to_string(&self.arch)?);
        let data: Vec<(&str, &Tensor)> = self.tensors.iter().map(|(k, v)| (k.as_str(), v)).collect();
        let bytes =
            safetensors::serialize(data, Some(meta)).map_err(|e| Error::Checkpoint(format!("serialise: {e}")))?;
        canonical_header(bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let meta = header
            .metadata()
            .clone()
            .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
        let field = |k: &str| {
            meta.get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing metadata field {k}")))
        };
        if field("format")? != FORMAT_TAG {
            return Err(Error::Checkpoint("not an ndels checkpoint".into()));
        }
        let version: u32 = field("version")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad version field".into()))?;
        if version > FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "checkpoint version {version} is newer than supported {FORMAT_VERSION}"
            )));
        }
        let arch = serde_json::from_str(&field("arch")?)?;
        let st =
            safetensors::SafeTensors::deserialize(bytes).map_err(|e| Error::Checkpoint(format!("bad body: {e}")))?;
        let mut tensors = BTreeMap::new();
        for (name, view) in st.tensors() {
            tensors.insert(name, view.load(&Device::Cpu)?);
        }
        Ok(Self {
            kind: field("kind")?,
            version,
            arch,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    pub fn expect_kind(&self, kind: &str) -> Result<()> {
        if self.kind != kind {
            return Err(Error::Checkpoint(format!(
                "expected a {kind} checkpoint, found {}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Tensors under `prefix.` with the prefix stripped.
    pub fn namespace(&self, prefix: &str) -> BTreeMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }
}
