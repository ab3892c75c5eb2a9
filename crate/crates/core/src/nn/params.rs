use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{NnError, Result};

#[derive(Debug, Clone)]
pub enum Param {
    Frozen(Tensor),
    Trainable(Var),
}

impl Param {
    pub fn tensor(&self) -> &Tensor {
        match self {
            Param::Frozen(t) => t,
            Param::Trainable(v) => v.as_tensor(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Param::Trainable(_))
    }
}

/// Bit-exact copy of a set of parameters, for before/after comparisons.
pub type Snapshot = BTreeMap<String, Vec<u64>>;

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn trainable(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.entries.iter().filter_map(|(k, p)| match p {
            Param::Trainable(v) => Some((k, v)),
            Param::Frozen(_) => None,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, v)| v.elem_count()).sum()
    }

    pub fn count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, p)| p.tensor().elem_count())
            .sum()
    }

    pub(crate) fn insert(&mut self, name: String, param: Param) -> Result<()> {
        if self.entries.contains_key(&name) {
            return Err(NnError::Config(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, param);
        Ok(())
    }

    /// Bit patterns of every parameter whose name starts with one of `prefixes`.
    pub fn snapshot(&self, prefixes: &[&str]) -> Result<Snapshot> {
        let mut out = Snapshot::new();
        for (name, p) in &self.entries {
            if prefixes.iter().any(|pre| name.starts_with(pre)) {
                let bits = p
                    .tensor()
                    .flatten_all()?
                    .to_dtype(DType::F64)?
                    .to_vec1::<f64>()?
                    .into_iter()
                    .map(f64::to_bits)
                    .collect();
                out.insert(name.clone(), bits);
            }
        }
        Ok(out)
    }

    /// All tensors, for checkpointing.
    pub fn tensors(&self) -> BTreeMap<String, Tensor> {
        self.entries
            .iter()
            .map(|(k, p)| (k.clone(), p.tensor().clone()))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
    Normal(f64),
    Uniform(f64),
}

/// Creates parameters, either freshly initialized from a seeded RNG or taken
/// from a loaded checkpoint when a tensor of the same name exists there.
pub struct ParamInit<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
    loaded: Option<&'a HashMap<String, Tensor>>,
}

impl<'a> ParamInit<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            device: device.clone(),
            loaded: None,
        }
    }

    pub fn with_loaded(mut self, loaded: &'a HashMap<String, Tensor>) -> Self {
        self.loaded = Some(loaded);
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn sample(&mut self, n: usize, init: Init) -> Vec<f64> {
        let rng = &mut self.rng;
        match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                .collect(),
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break std * z;
                    }
                })
                .collect(),
            Init::Uniform(bound) => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
        }
    }

    pub fn tensor(
        &mut self,
        name: &str,
        shape: &[usize],
        init: Init,
        trainable: bool,
    ) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        // The RNG advances even for loaded tensors so that later fresh
        // parameters do not depend on which names were found.
        let values = self.sample(n, init);
        let t = match self.loaded.and_then(|m| m.get(name)) {
            Some(t) => {
                if t.dims() != shape {
                    return Err(NnError::Shape(format!(
                        "checkpoint tensor `{name}` has shape {:?}, expected {shape:?}",
                        t.dims()
                    )));
                }
                t.to_dtype(self.dtype)?.to_device(&self.device)?
            }
            None => Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?,
        };
        if trainable {
            let v = Var::from_tensor(&t)?;
            let out = v.as_tensor().clone();
            self.store.insert(name.to_string(), Param::Trainable(v))?;
            Ok(out)
        } else {
            self.store.insert(name.to_string(), Param::Frozen(t.clone()))?;
            Ok(t)
        }
    }
}
