//! Named parameter storage, seeded initialisation and the Adam optimiser.
//!
//! Parameter values are kept at `f32` precision (every write through
//! [`ParamStore::add`] or [`Adam::step`] rounds) so checkpoints stored as
//! little-endian `f32` reproduce forward passes bit for bit. Arithmetic is
//! carried out in `f64`.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub frozen: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, mut value: Tensor, frozen: bool) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        value.round_to_f32();
        let id = ParamId(self.entries.len());
        self.by_name.insert(name.clone(), id);
        self.entries.push(Param { name, value, frozen });
        id
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    /// Raw mutable access. Writes through here are not rounded; gradient
    /// checks rely on that to perturb by less than one `f32` ulp.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    /// Replaces a value (rounded to `f32`), keeping the shape.
    pub fn set(&mut self, id: ParamId, mut value: Tensor) {
        assert_eq!(value.shape(), self.get(id).shape(), "shape change for {}", self.name(id));
        value.round_to_f32();
        self.entries[id.0].value = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn is_frozen(&self, id: ParamId) -> bool {
        self.entries[id.0].frozen
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.entries.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = ParamId> + 'a {
        self.iter().filter(move |(_, p)| p.name.starts_with(prefix)).map(|(id, _)| id)
    }

    /// SHA-256 over names, shapes and `f32` bit patterns of the selected
    /// parameters, in registration order.
    pub fn fingerprint(&self, select: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.entries.iter().filter(|p| select(p)) {
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            for v in p.value.data() {
                h.update((*v as f32).to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Seeded weight initialisers.
pub struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng) -> Self {
        Init { rng }
    }

    pub fn normal(&mut self, rows: usize, cols: usize, std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..rows * cols).map(|_| dist.sample(self.rng)).collect();
        Tensor::from_vec(rows, cols, data)
    }

    /// Glorot-uniform for a `fan_in × fan_out` weight.
    pub fn xavier(&mut self, fan_in: usize, fan_out: usize) -> Tensor {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-bound..bound)).collect();
        Tensor::from_vec(fan_in, fan_out, data)
    }
}

/// Adam with bias correction. Frozen parameters are never touched.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    first: Vec<Option<Tensor>>,
    second: Vec<Option<Tensor>>,
    steps: u64,
}

impl Default for Adam {
    fn default() -> Self {
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, first: Vec::new(), second: Vec::new(), steps: 0 }
    }
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), None);
            self.second.resize(store.len(), None);
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        for (id, grad) in grads {
            if store.is_frozen(*id) {
                continue;
            }
            let (rows, cols) = grad.shape();
            let m = self.first[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
            for (mv, g) in m.data_mut().iter_mut().zip(grad.data()) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * g;
            }
            let v = self.second[id.0].get_or_insert_with(|| Tensor::zeros(rows, cols));
            for (vv, g) in v.data_mut().iter_mut().zip(grad.data()) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g;
            }
            let m = self.first[id.0].as_ref().expect("initialised above");
            let v = self.second[id.0].as_ref().expect("initialised above");
            let value = store.value_mut(*id);
            for ((w, mv), vv) in value.data_mut().iter_mut().zip(m.data()).zip(v.data()) {
                let update = lr * (mv / bc1) / ((vv / bc2).sqrt() + self.eps);
                *w = (*w - update) as f32 as f64;
            }
        }
    }
}
