//! Named, seeded parameter storage.
//!
//! Networks are described by constructors that request tensors by name and
//! shape through a [`Scope`]. A store in *initialising* mode creates missing
//! parameters from its own ChaCha stream, so the same seed always produces the
//! same weights; a frozen store only hands out what it already holds and
//! rejects shape mismatches. Because both modes go through the same
//! constructor, every weight shape is derived from the architecture alone.

use std::collections::BTreeMap;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `±sqrt(6 / fan_in)` scaled by `gain`.
    KaimingUniform {
        fan_in: usize,
        gain: f64,
    },
}

pub struct VarStore {
    vars: Mutex<BTreeMap<String, Var>>,
    rng: Mutex<Option<ChaCha8Rng>>,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for VarStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("VarStore")
            .field("params", &self.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl Clone for VarStore {
    /// Deep copy: the clone owns independent variables.
    fn clone(&self) -> Self {
        let vars = self
            .vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), Var::from_tensor(&v.as_tensor().copy().unwrap()).unwrap()))
            .collect();
        Self {
            vars: Mutex::new(vars),
            rng: Mutex::new(self.rng.lock().unwrap().clone()),
            dtype: self.dtype,
            device: self.device.clone(),
        }
    }
}

impl VarStore {
    /// Store that creates parameters on first request.
    pub fn initializing(seed: u64, dtype: DType) -> Self {
        Self {
            vars: Mutex::new(BTreeMap::new()),
            rng: Mutex::new(Some(ChaCha8Rng::seed_from_u64(seed))),
            dtype,
            device: Device::Cpu,
        }
    }

    /// Store holding exactly `tensors`; unknown names are errors.
    pub fn frozen(tensors: BTreeMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let vars = tensors
            .into_iter()
            .map(|(k, t)| Ok((k, Var::from_tensor(&t.to_dtype(dtype)?)?)))
            .collect::<Result<_>>()?;
        Ok(Self {
            vars: Mutex::new(vars),
            rng: Mutex::new(None),
            dtype,
            device: Device::Cpu,
        })
    }

    /// Stops creating new parameters.
    pub fn freeze(&self) {
        *self.rng.lock().unwrap() = None;
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn len(&self) -> usize {
        self.vars.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn root(&self) -> Scope<'_> {
        Scope {
            store: self,
            prefix: String::new(),
        }
    }

    pub fn get_var(&self, name: &str) -> Option<Var> {
        self.vars.lock().unwrap().get(name).cloned()
    }

    /// All variables whose name starts with `prefix`, in name order.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn all_vars(&self) -> Vec<(String, Var)> {
        self.vars_with_prefix("")
    }

    /// Trainable variables (everything except batch-norm running statistics).
    pub fn trainable_vars(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars_with_prefix(prefix)
            .into_iter()
            .filter(|(k, _)| !is_buffer(k))
            .collect()
    }

    /// Snapshot of all parameters as plain tensors.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.vars
            .lock()
            .unwrap()
            .iter()
            .filter(|(k, _)| !is_buffer(k))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    /// Overwrites an existing variable in place.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let vars = self.vars.lock().unwrap();
        let var = vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        if var.dims() != value.dims() {
            return Err(Error::Checkpoint(format!(
                "{name}: expected shape {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    fn fetch(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut vars = self.vars.lock().unwrap();
        if let Some(var) = vars.get(&name) {
            if var.dims() != shape {
                return Err(Error::Checkpoint(format!(
                    "{name}: architecture expects {shape:?}, store holds {:?}",
                    var.dims()
                )));
            }
            return Ok(var.as_tensor().clone());
        }
        let mut rng = self.rng.lock().unwrap();
        let Some(rng) = rng.as_mut() else {
            return Err(Error::Checkpoint(format!("missing parameter {name}")));
        };
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::KaimingUniform { fan_in, gain } => {
                let bound = gain * (6.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        vars.insert(name, var);
        Ok(out)
    }
}

/// Running statistics are stored alongside weights but never optimised.
pub fn is_buffer(name: &str) -> bool {
    name.ends_with(".running_mean") || name.ends_with(".running_var")
}

/// A name prefix inside a [`VarStore`].
#[derive(Clone)]
pub struct Scope<'a> {
    store: &'a VarStore,
    prefix: String,
}

impl<'a> Scope<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> Scope<'a> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Scope {
            store: self.store,
            prefix,
        }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        self.store.fetch(self.path(name), shape, init)
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn store(&self) -> &'a VarStore {
        self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}
