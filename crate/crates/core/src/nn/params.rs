use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Initialization rule for a fresh parameter.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Const(f64),
    /// Uniform on `[-bound, bound]`.
    Uniform(f64),
    /// Uniform with bound `sqrt(6 / fan_in)`, suited to ReLU stacks.
    KaimingUniform { fan_in: usize },
}

struct BuilderState {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

/// Creates named parameters in construction order from one seeded stream.
///
/// Names are dotted paths; `pp` descends one level. Two builders created with
/// the same seed and driven through the same construction produce identical
/// parameters.
#[derive(Clone)]
pub struct ParamBuilder {
    state: Arc<Mutex<BuilderState>>,
    path: String,
}

impl ParamBuilder {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            state: Arc::new(Mutex::new(BuilderState {
                params: BTreeMap::new(),
                buffers: BTreeMap::new(),
                rng: ChaCha8Rng::seed_from_u64(seed),
                dtype,
                device: Device::Cpu,
            })),
            path: String::new(),
        }
    }

    pub fn pp(&self, name: impl std::fmt::Display) -> Self {
        Self {
            state: self.state.clone(),
            path: self.join(&name.to_string()),
        }
    }

    fn join(&self, name: &str) -> String {
        if self.path.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.path, name)
        }
    }

    pub fn dtype(&self) -> DType {
        self.state.lock().expect("param builder poisoned").dtype
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = self.join(name);
        let mut st = self.state.lock().expect("param builder poisoned");
        let len: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Const(v) => vec![v; len],
            Init::Uniform(b) => (0..len).map(|_| st.rng.random_range(-b..=b)).collect(),
            Init::KaimingUniform { fan_in } => {
                let b = (6.0 / fan_in.max(1) as f64).sqrt();
                (0..len).map(|_| st.rng.random_range(-b..=b)).collect()
            }
        };
        let t = Tensor::from_vec(values, shape, &st.device)?.to_dtype(st.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        if st.params.insert(full.clone(), var).is_some() {
            return Err(Error::InvalidInput(format!("duplicate parameter name {full}")));
        }
        Ok(out)
    }

    /// Non-trainable state (running statistics) that still travels with checkpoints.
    pub fn buffer(&self, name: &str, shape: &[usize], value: f64) -> Result<Var> {
        let full = self.join(name);
        let mut st = self.state.lock().expect("param builder poisoned");
        let t = Tensor::full(value, shape, &st.device)?.to_dtype(st.dtype)?;
        let var = Var::from_tensor(&t)?;
        st.buffers.insert(full, var.clone());
        Ok(var)
    }

    pub fn finish(self) -> ParamStore {
        let st = self.state.lock().expect("param builder poisoned");
        ParamStore {
            params: st.params.clone(),
            buffers: st.buffers.clone(),
        }
    }
}

/// Named trainable parameters and buffers of a constructed model.
#[derive(Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn params(&self) -> &BTreeMap<String, Var> {
        &self.params
    }

    pub fn buffers(&self) -> &BTreeMap<String, Var> {
        &self.buffers
    }

    /// Trainable scalars whose name starts with `prefix` (all when empty).
    pub fn count(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(name, _)| prefix.is_empty() || in_group(name, prefix))
            .map(|(_, v)| v.elem_count())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.params.get(name).or_else(|| self.buffers.get(name))
    }

    /// Every parameter and buffer, parameters first.
    pub fn named_tensors(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.params.iter().chain(self.buffers.iter())
    }
}

/// True when `name` lies under the dotted `prefix`.
pub(crate) fn in_group(name: &str, prefix: &str) -> bool {
    name == prefix || (name.starts_with(prefix) && name.as_bytes().get(prefix.len()) == Some(&b'.'))
}
