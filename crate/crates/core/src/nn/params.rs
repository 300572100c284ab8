//! Named parameter storage and per-forward binding into the autograd graph.

use std::cell::RefCell;
use std::collections::HashMap;

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{Grads, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Flat, insertion-ordered parameter table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), data.len(), "param {name} has wrong length");
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry { name, shape: shape.to_vec(), data });
        ParamId(self.entries.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    pub fn get(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut ParamEntry<T> {
        &mut self.entries[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.id_of(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut ParamEntry<T>> {
        self.id_of(name).map(|id| &mut self.entries[id.0])
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    /// Overwrites values from `other`, which must have the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.entries.len(), other.entries.len(), "parameter layout mismatch");
        for (dst, src) in self.entries.iter_mut().zip(&other.entries) {
            assert!(dst.name == src.name && dst.shape == src.shape, "parameter layout mismatch at {}", dst.name);
            dst.data.clone_from(&src.data);
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for e in &self.entries {
            out.add(e.name.clone(), &e.shape, e.data.iter().map(|v| U::of(v.to_f64().unwrap())).collect());
        }
        out
    }
}

/// Binds stored parameters as graph leaves for one forward pass.
///
/// With `trainable = false` no graph is recorded for parameter paths.
pub struct Binding<'a, T: Scalar> {
    store: &'a ParamStore<T>,
    trainable: bool,
    cache: RefCell<Vec<Option<Tensor<T>>>>,
}

impl<'a, T: Scalar> Binding<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self { store, trainable, cache: RefCell::new(vec![None; store.len()]) }
    }

    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self::new(store, false)
    }

    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self::new(store, true)
    }

    pub fn get(&self, id: ParamId) -> Tensor<T> {
        let mut cache = self.cache.borrow_mut();
        cache[id.0]
            .get_or_insert_with(|| {
                let e = self.store.get(id);
                if self.trainable {
                    Tensor::param(&e.shape, e.data.clone())
                } else {
                    Tensor::from_vec(&e.shape, e.data.clone())
                }
            })
            .clone()
    }

    /// Gradients aligned with the store; `None` for parameters the loss never touched.
    pub fn collect_grads(&self, grads: &mut Grads<T>) -> Vec<Option<Vec<T>>> {
        self.cache.borrow().iter().map(|t| t.as_ref().and_then(|t| grads.take(t))).collect()
    }
}

/// Registers named parameters under a dotted prefix with deterministic init.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: String::new() }
    }

    pub fn sub(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        ParamBuilder { store: self.store, rng: self.rng, prefix }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = if bound > 0.0 {
            let dist = Uniform::new_inclusive(-bound, bound);
            (0..n).map(|_| T::of(dist.sample(self.rng))).collect()
        } else {
            vec![T::zero(); n]
        };
        let full = self.full_name(name);
        self.store.add(full, shape, data)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], mean: f64, std: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let dist = Normal::new(mean, std).expect("valid normal");
        let data = (0..n).map(|_| T::of(dist.sample(self.rng))).collect();
        let full = self.full_name(name);
        self.store.add(full, shape, data)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let full = self.full_name(name);
        self.store.add(full, shape, vec![T::of(v); n])
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        self.constant(name, shape, 0.0)
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        self.store
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }
}
