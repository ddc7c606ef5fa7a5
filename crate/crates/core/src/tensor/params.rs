use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{shape_err, Result, Tensor, TensorError};

/// Rounds to the nearest f32 so stored parameters survive the f32 checkpoint.
#[inline]
pub(crate) fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

/// Initialization scheme for a new parameter.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian scaled by `gain / sqrt(fan_in)`.
    FanIn { fan_in: usize, gain: f64 },
}

/// A trainable tensor with its Adam moment slots.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    value: Tensor,
    pub(crate) m: Vec<f64>,
    pub(crate) v: Vec<f64>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut [f64], &mut [f64], &mut [f64]) {
        (self.value.data_mut(), &mut self.m, &mut self.v)
    }
}

/// Named parameter collection. Iteration order is the lexicographic name
/// order, which makes every traversal deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; values are rounded to f32 precision.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::DuplicateParam(name));
        }
        let n = value.len();
        let value = value.map(f32_round);
        self.params.insert(
            name,
            Param {
                value,
                m: vec![0.0; n],
                v: vec![0.0; n],
            },
        );
        Ok(())
    }

    pub fn init(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
                .collect(),
            Init::FanIn { fan_in, gain } => {
                let std = gain / (fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    std * z
                })
                    .collect()
            }
        };
        self.insert(name, Tensor::new(shape.to_vec(), data)?)
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.params
            .get(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        self.get(name).map(|p| &p.value)
    }

    pub(crate) fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params
            .get_mut(name)
            .ok_or_else(|| TensorError::UnknownParam(name.to_string()))
    }

    /// Replaces a parameter's values; the shape must match.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(shape_err(
                "ParamStore::set_value",
                format!("{name}: {:?} vs {:?}", p.value.shape(), value.shape()),
            ));
        }
        p.value = value.map(f32_round);
        Ok(())
    }

    /// Writes one raw entry without rounding. Used by finite differences.
    pub(crate) fn set_entry_raw(&mut self, name: &str, idx: usize, value: f64) -> Result<()> {
        let p = self.get_mut(name)?;
        p.value.data_mut()[idx] = value;
        Ok(())
    }

    /// Overwrites moment slots (checkpoint restore).
    pub(crate) fn set_moments(&mut self, name: &str, m: Vec<f64>, v: Vec<f64>) -> Result<()> {
        let p = self.get_mut(name)?;
        if m.len() != p.value.len() || v.len() != p.value.len() {
            return Err(shape_err("ParamStore::set_moments", name.to_string()));
        }
        p.m = m;
        p.v = v;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar entries across all parameters.
    pub fn num_entries(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    /// Optimizer step counter.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn set_step(&mut self, step: u64) {
        self.step = step;
    }

    /// Adds seeded Gaussian noise of the given scale to every parameter.
    /// Test helper for exercising zero-initialized layers.
    pub fn perturb(&mut self, seed: u64, std: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params.values_mut() {
            for x in p.value.data_mut() {
                let z: f64 = StandardNormal.sample(&mut rng);
                *x = f32_round(*x + std * z);
            }
        }
    }

    /// Sets every parameter to zero.
    pub fn zero_all(&mut self) {
        for p in self.params.values_mut() {
            p.value.data_mut().fill(0.0);
        }
    }

    /// Zeroes the parameters whose name starts with `prefix`.
    pub fn zero_prefix(&mut self, prefix: &str) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with(prefix) {
                p.value.data_mut().fill(0.0);
            }
        }
    }

    /// Moves every parameter of `other` into `self`.
    pub fn merge(&mut self, other: ParamStore) -> Result<()> {
        for (name, p) in other.params {
            if self.params.contains_key(&name) {
                return Err(TensorError::DuplicateParam(name));
            }
            self.params.insert(name, p);
        }
        Ok(())
    }
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Grads {
    map: BTreeMap<String, Vec<f64>>,
}

impl Grads {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.map.get(name).map(Vec::as_slice)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f64])> {
        self.map.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Sets the gradient of `name`, replacing any previous entry.
    pub fn insert(&mut self, name: impl Into<String>, g: Vec<f64>) {
        self.map.insert(name.into(), g);
    }

    pub(crate) fn add(&mut self, name: &str, g: &[f64]) {
        match self.map.get_mut(name) {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => {
                self.map.insert(name.to_string(), g.to_vec());
            }
        }
    }

    /// Sums another gradient set into this one.
    pub fn accumulate(&mut self, other: &Grads) {
        for (name, g) in &other.map {
            self.add(name, g);
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.map.values_mut() {
            g.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Largest absolute gradient entry, or 0 for an empty set.
    pub fn max_abs(&self) -> f64 {
        self.map
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Largest absolute entry among parameters whose name starts with `prefix`.
    pub fn max_abs_prefix(&self, prefix: &str) -> f64 {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, g)| g.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}
