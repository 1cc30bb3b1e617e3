//! Named parameter storage shared by the encoder, matching head and classifier.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Real, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Learnable tensors keyed by stable dotted names, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Number of scalar parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Truncated normal: resample anything beyond two standard deviations.
pub fn truncated_normal<T: Real, R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break T::of(z * std);
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape and data agree")
}

pub fn filled<T: Real>(shape: Vec<usize>, value: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape, vec![T::of(value); n]).expect("shape and data agree")
}

/// Adds an affine map `[rows, cols]` weight plus `[cols]` zero bias under `prefix.w` / `prefix.b`.
pub(crate) fn add_affine<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    rows: usize,
    cols: usize,
) {
    add_affine_with_std(store, rng, prefix, rows, cols, INIT_STD);
}

/// Like [`add_affine`] with the weight scale `sqrt(2 / rows)` suited to a ReLU
/// that follows the map.
pub(crate) fn add_relu_affine<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    rows: usize,
    cols: usize,
) {
    add_affine_with_std(store, rng, prefix, rows, cols, (2.0 / rows as f64).sqrt());
}

fn add_affine_with_std<T: Real, R: Rng>(
    store: &mut ParamStore<T>,
    rng: &mut R,
    prefix: &str,
    rows: usize,
    cols: usize,
    std: f64,
) {
    store.insert(
        format!("{prefix}.w"),
        truncated_normal(rng, vec![rows, cols], std),
    );
    store.insert(format!("{prefix}.b"), filled(vec![cols], 0.0));
}
