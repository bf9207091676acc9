use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{invalid, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// Index of a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named collection of trainable tensors.
///
/// Names are dotted paths (`encoder.layer0.qkv.w`); prefixes group the
/// parameters a training stage is allowed to update.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    index: BTreeMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, tensor: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(invalid(alloc::format!("parameter `{name}` registered twice")));
        }
        let id = ParamId(self.tensors.len());
        self.names.push(name.to_string());
        self.tensors.push(tensor);
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    /// Replaces a tensor by name, keeping its id. Shapes must agree.
    pub fn set(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| invalid(alloc::format!("unknown parameter `{name}`")))?;
        if self.tensors[id.0].shape() != tensor.shape() {
            return Err(crate::error::shape_err(
                "ParamStore::set",
                self.tensors[id.0].shape(),
                tensor.shape(),
            ));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Mask selecting every parameter whose name starts with one of `prefixes`.
    pub fn mask_prefixes(&self, prefixes: &[&str]) -> Vec<bool> {
        self.names
            .iter()
            .map(|n| prefixes.iter().any(|p| n.starts_with(p)))
            .collect()
    }
}

/// Gradients keyed by [`ParamId`]; `None` for parameters that received none.
#[derive(Clone, Debug)]
pub struct ParamGrads<T> {
    pub grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> ParamGrads<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            grads: (0..n).map(|_| None).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Adds `other` element-wise, in parameter order.
    pub fn accumulate(&mut self, other: &ParamGrads<T>) {
        for (mine, theirs) in self.grads.iter_mut().zip(&other.grads) {
            match (mine.as_mut(), theirs) {
                (_, None) => {}
                (None, Some(t)) => *mine = Some(t.clone()),
                (Some(m), Some(t)) => {
                    for (a, b) in m.data_mut().iter_mut().zip(t.data()) {
                        *a += *b;
                    }
                }
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::all_finite)
    }
}

/// Xavier-uniform weight of shape `fan_in × fan_out`.
pub fn xavier<T: Real, R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor<T> {
    let bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Tensor::from_fn(&[fan_in, fan_out], |_| T::of(dist.sample(rng)))
}

/// Normal(0, std) tensor.
pub fn normal<T: Real, R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| T::of(dist.sample(rng)))
}
