//! Named parameter registry: owns every learned weight and running-statistic
//! buffer, hands copies into graphs per pass, and keeps optimizer momentum.
//!
//! Registration order is the canonical order for checkpoints and updates,
//! so builds must register deterministically.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Array, Graph, Value};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

struct Entry {
    name: String,
    value: Array,
    momentum: Vec<f64>,
    trainable: bool,
}

/// Registry of parameters and buffers. Buffers (running statistics) ride
/// along in checkpoints but never receive gradients or updates.
#[derive(Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    fn insert(&mut self, name: &str, value: Array, trainable: bool) -> Result<ParamId> {
        if self.by_name.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {:?}", name)));
        }
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        let momentum = vec![0.0; value.numel()];
        self.entries.push(Entry { name: name.to_string(), value, momentum, trainable });
        Ok(ParamId(id))
    }

    pub fn register(&mut self, name: &str, value: Array) -> Result<ParamId> {
        self.insert(name, value, true)
    }

    pub fn register_buffer(&mut self, name: &str, value: Array) -> Result<ParamId> {
        self.insert(name, value, false)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Array {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.entries[id.0].value
    }

    pub fn momentum(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].momentum
    }

    pub fn momentum_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].momentum
    }

    /// Value and momentum of one entry, borrowed together for optimizer updates.
    pub fn value_and_momentum_mut(&mut self, id: ParamId) -> (&mut Array, &mut [f64]) {
        let entry = &mut self.entries[id.0];
        (&mut entry.value, &mut entry.momentum)
    }

    pub fn trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    /// All ids in registration order.
    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Scalar count over trainable parameters only.
    pub fn trainable_scalars(&self) -> usize {
        self.entries.iter().filter(|e| e.trainable).map(|e| e.value.numel()).sum()
    }

    /// Scalar count over buffers only.
    pub fn buffer_scalars(&self) -> usize {
        self.entries.iter().filter(|e| !e.trainable).map(|e| e.value.numel()).sum()
    }
}

/// Per-pass association between parameters and their graph leaves.
/// Drained by the optimizer after backward to fetch gradients.
#[derive(Default)]
pub struct Binding {
    pub pairs: Vec<(ParamId, Value)>,
}

impl Binding {
    pub fn new() -> Self {
        Binding::default()
    }

    /// Copy the parameter into the graph as a leaf and remember the pair.
    pub fn bind(&mut self, store: &ParamStore, g: &mut Graph, id: ParamId) -> Value {
        let v = g.leaf(store.value(id).clone(), store.trainable(id));
        self.pairs.push((id, v));
        v
    }
}

/// U(-bound, bound) samples in deterministic draw order.
pub fn uniform_init(rng: &mut ChaCha20Rng, shape: Vec<usize>, bound: f64) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Array::from_vec(shape, data)
}

/// Per-kernel convolution weights `[K, D_in, D_out]`, scaled by
/// 1/sqrt(D_in * K) so the summed kernel contributions keep unit variance.
pub fn kernel_weight_init(rng: &mut ChaCha20Rng, k: usize, d_in: usize, d_out: usize) -> Array {
    let bound = 1.0 / ((d_in * k) as f64).sqrt();
    uniform_init(rng, vec![k, d_in, d_out], bound)
}

/// Dense layer weights `[D_in, D_out]`, fan-in scaled.
pub fn linear_weight_init(rng: &mut ChaCha20Rng, d_in: usize, d_out: usize) -> Array {
    let bound = 1.0 / (d_in as f64).sqrt();
    uniform_init(rng, vec![d_in, d_out], bound)
}

/// Add U(-scale, scale) noise to every trainable coordinate.
///
/// Gradient checks must run at a generic parameter point: zero-initialized
/// biases sit exactly on relu/leaky-relu kinks (attention inputs pooled from
/// unsupported kernels are exactly zero), where finite differences average
/// the two one-sided slopes and disagree with any subgradient choice.
pub fn jitter_trainable(store: &mut ParamStore, rng: &mut ChaCha20Rng, scale: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        if store.trainable(id) {
            for v in store.value_mut(id).data_mut() {
                *v += rng.gen_range(-scale..scale);
            }
        }
    }
}
