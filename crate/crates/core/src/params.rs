//! Named parameter storage shared by every trainable component.

use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Flat registry of named `f64` matrices.
///
/// Names are dotted paths (`encoder.sp.0.tcn1.w0`); the first segment is the
/// parameter group used for stage freezing and hashing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array2<f64>>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Registers a parameter. Panics on duplicate names, which is always a
    /// construction bug.
    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        ParamId(id)
    }

    /// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: (usize, usize),
        fan_in: usize,
        rng: &mut R,
    ) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_fn(shape, |_| rng.random_range(-bound..bound));
        self.insert(name, value)
    }

    pub fn insert_zeros(&mut self, name: impl Into<String>, shape: (usize, usize)) -> ParamId {
        self.insert(name, Array2::zeros(shape))
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn group_of(&self, id: ParamId) -> &str {
        let name = self.name(id);
        name.split('.').next().unwrap_or(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes and raw bit patterns of every parameter
    /// whose group satisfies `filter`.
    pub fn hash_where(&self, filter: impl Fn(&str) -> bool) -> String {
        let mut hasher = Sha256::new();
        for id in self.ids() {
            if !filter(self.group_of(id)) {
                continue;
            }
            let v = self.get(id);
            hasher.update(self.name(id).as_bytes());
            hasher.update((v.nrows() as u64).to_le_bytes());
            hasher.update((v.ncols() as u64).to_le_bytes());
            for x in v.iter() {
                hasher.update(x.to_bits().to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }

    pub fn hash_all(&self) -> String {
        self.hash_where(|_| true)
    }
}

/// Gradients keyed by parameter id. Missing entries mean "no gradient".
#[derive(Debug, Clone, Default)]
pub struct GradStore {
    grads: Vec<Option<Array2<f64>>>,
}

impl GradStore {
    pub fn new(len: usize) -> Self {
        Self {
            grads: vec![None; len],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<f64>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Array2<f64>) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &GradStore) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.mapv_inplace(|x| x * factor);
        }
    }

    pub fn retain(&mut self, keep: impl Fn(ParamId) -> bool) {
        for (i, g) in self.grads.iter_mut().enumerate() {
            if !keep(ParamId(i)) {
                *g = None;
            }
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Array2<f64>)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

impl ParamStore {
    /// Plain gradient-descent step `p ← p − lr·g` on every parameter that has
    /// a gradient. `lr == 0` leaves the store untouched.
    pub fn descend(&mut self, grads: &GradStore, lr: f64) {
        if lr == 0.0 {
            return;
        }
        for (id, g) in grads.iter() {
            if let Some(p) = self.values.get_mut(id.0) {
                p.scaled_add(-lr, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn descend_matches_closed_form() {
        // f(p) = 0.5·a·p², gradient a·p
        let mut store = ParamStore::new();
        let id = store.insert("q.p", array![[1.5, -2.0]]);
        let a = 3.0;
        let mut g = GradStore::new(1);
        g.accumulate(id, &(store.get(id) * a));
        store.descend(&g, 0.1);
        let expected = array![[1.5 * (1.0 - 0.1 * a), -2.0 * (1.0 - 0.1 * a)]];
        assert!((store.get(id) - &expected).iter().all(|d| d.abs() < 1e-12));
        let before = store.clone();
        store.descend(&g, 0.0);
        assert_eq!(store, before);
    }

    #[test]
    fn hash_tracks_values_and_groups() {
        let mut s = ParamStore::new();
        let a = s.insert("enc.w", array![[1.0, 2.0]]);
        s.insert("router.w", array![[3.0]]);
        let enc = s.hash_where(|g| g == "enc");
        let router = s.hash_where(|g| g == "router");
        s.get_mut(a)[[0, 0]] = 1.5;
        assert_ne!(enc, s.hash_where(|g| g == "enc"));
        assert_eq!(router, s.hash_where(|g| g == "router"));
    }

    #[test]
    fn grad_accumulate_and_norm() {
        let mut g = GradStore::new(2);
        g.accumulate(ParamId(1), &array![[3.0, 0.0]]);
        g.accumulate(ParamId(1), &array![[0.0, 4.0]]);
        assert_eq!(g.global_norm(), 5.0);
        assert!(g.get(ParamId(0)).is_none());
    }
}
