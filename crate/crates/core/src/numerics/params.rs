use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether a graph built over this store records gradients for it.
    pub trainable: bool,
}

/// Named parameter collection, in insertion order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::structural(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.index.insert(name.clone(), id);
        self.params.push(Param {
            name,
            tensor,
            trainable,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].tensor
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].tensor
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar parameters.
    pub fn num_elements(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    trainable: p.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradients of a scalar loss, indexed by parameter. Parameters the loss
/// does not depend on (or that are not trainable) have no entry.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn empty(n_params: usize) -> Self {
        Self {
            grads: vec![None; n_params],
        }
    }

    pub(crate) fn set(&mut self, id: ParamId, grad: Vec<T>) {
        self.grads[id.0] = Some(grad);
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.iter().all(Option::is_none)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_deref().map(|g| (ParamId(i), g)))
    }

    /// `self += scale * other`, creating entries as needed.
    pub fn accumulate(&mut self, other: &Gradients<T>, scale: T) {
        if self.grads.len() < other.grads.len() {
            self.grads.resize(other.grads.len(), None);
        }
        for (i, g) in other.grads.iter().enumerate() {
            let Some(g) = g else { continue };
            match &mut self.grads[i] {
                Some(acc) => acc.iter_mut().zip(g).for_each(|(a, &b)| *a += scale * b),
                slot @ None => *slot = Some(g.iter().map(|&b| scale * b).collect()),
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        for g in self.grads.iter_mut().flatten() {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.iter())
            .map(|&x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so that the global L2 norm is at most `max_norm`; returns
    /// the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm.is_finite() {
            self.scale(T::lit(max_norm / norm));
        }
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut store = ParamStore::<f32>::new();
        store.add("a", Tensor::zeros(vec![2]), true).unwrap();
        assert!(store.add("a", Tensor::zeros(vec![2]), true).is_err());
        assert_eq!(store.num_elements(), 2);
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut g = Gradients::<f64>::empty(2);
        g.set(ParamId(0), vec![3.0]);
        g.set(ParamId(1), vec![4.0]);
        let before = g.clip_global_norm(1.0);
        assert_eq!(before, 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
    }
}
