//! Named parameter storage and the per-forward binding of parameters to a tape.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rsfme_tensor::{Grads, Graph, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: Tensor,
    /// Running statistics and other buffers are stored but never updated by the optimizer.
    pub trainable: bool,
}

/// Every tensor a model owns, keyed by a dotted path such as
/// `swint.blocks.0.attn.q.weight`. Iteration order is lexicographic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Entry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor,
        trainable: bool,
    ) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name, Entry { value, trainable });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn entry(&self, name: &str) -> Option<&Entry> {
        self.entries.get(name)
    }

    /// Replaces a value, keeping its shape.
    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if e.value.shape() != value.shape() {
            return Err(Error::Config(format!(
                "{name}: shape {:?} does not match {:?}",
                value.shape(),
                e.value.shape()
            )));
        }
        e.value = value;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(k, _)| k.clone())
            .collect()
    }

    /// Total number of trainable scalars.
    pub fn num_trainable(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    /// Rounds every stored value to single precision, which is the
    /// precision of the checkpoint format.
    pub fn round_to_f32(&mut self) {
        for e in self.entries.values_mut() {
            e.value.round_to_f32();
        }
    }

    /// Copies values from `other` for every name both stores share with equal
    /// shapes; errors when the name sets or shapes differ.
    pub fn load_values(&mut self, other: &BTreeMap<String, Tensor>) -> Result<()> {
        if other.len() != self.entries.len() {
            return Err(Error::Config(format!(
                "expected {} tensors, found {}",
                self.entries.len(),
                other.len()
            )));
        }
        for (name, value) in other {
            self.set(name, value.clone())?;
        }
        Ok(())
    }
}

/// Initialization helpers shared by the layers.
pub(crate) struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn trunc_normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        Tensor::trunc_normal(shape, std, self.rng)
    }

    /// He-normal for ReLU networks; `fan_in` is the receptive field size.
    pub fn he_normal(&mut self, shape: &[usize], fan_in: usize) -> Tensor {
        Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), self.rng)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics observed by a batch-norm layer during a training forward.
#[derive(Clone, Debug)]
pub struct NormUpdate {
    pub prefix: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

/// State for one forward pass: the tape, the parameters bound onto it, the
/// mode, and the dropout stream.
pub struct Ctx<'g, 's> {
    pub g: &'g mut Graph,
    store: &'s ParamStore,
    bound: HashMap<String, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    updates: Vec<NormUpdate>,
}

impl<'g, 's> Ctx<'g, 's> {
    pub fn new(g: &'g mut Graph, store: &'s ParamStore, mode: Mode, seed: u64) -> Self {
        Self {
            g,
            store,
            bound: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            updates: Vec::new(),
        }
    }

    /// Uses pre-made tape variables for the given names instead of binding
    /// the store's values (lets a gradient check perturb them).
    pub fn with_bindings(mut self, bindings: impl IntoIterator<Item = (String, Var)>) -> Self {
        self.bound.extend(bindings);
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn training(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The tape variable for a named parameter, binding it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let entry = self
            .store
            .entry(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        let v = if entry.trainable {
            self.g.leaf(entry.value.clone())
        } else {
            self.g.constant(entry.value.clone())
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn buffer(&self, name: &str) -> Result<&'s Tensor> {
        self.store.get(name)
    }

    pub(crate) fn record_norm(&mut self, update: NormUpdate) {
        self.updates.push(update);
    }

    pub fn take_norm_updates(&mut self) -> Vec<NormUpdate> {
        std::mem::take(&mut self.updates)
    }

    /// Inverted-dropout mask: zeros with probability `rate`, else `1/(1-rate)`.
    pub(crate) fn dropout_mask(&mut self, shape: &[usize], rate: f64) -> Tensor {
        let keep = 1.0 - rate;
        Tensor::from_fn(shape, |_| {
            if self.rng.random::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }

    /// Gradients for every bound trainable parameter, zeros where the loss
    /// does not depend on it.
    pub fn param_grads(&self, grads: &Grads) -> BTreeMap<String, Tensor> {
        self.store
            .iter()
            .filter(|(_, e)| e.trainable)
            .map(|(name, e)| {
                let g = self
                    .bound
                    .get(name)
                    .and_then(|&v| grads.get(v).cloned())
                    .unwrap_or_else(|| Tensor::zeros(e.value.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

/// Mixes several integers into one well-spread 64-bit seed (splitmix64 steps).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}
