use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::tape::numel;
use crate::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
    /// Buffers (batch-norm running statistics) are stored alongside weights
    /// but never receive gradients.
    pub trainable: bool,
}

/// Named, ordered collection of weights and buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<T>, trainable: bool) -> ParamId {
        let name = name.into();
        assert_eq!(value.len(), numel(shape), "parameter {name}: value count does not match shape");
        assert!(self.find(&name).is_none(), "parameter {name} registered twice");
        self.params.push(Param {
            name,
            shape: shape.to_vec(),
            grad: vec![T::zero(); value.len()],
            value,
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng>(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut R) -> ParamId {
        let value = (0..numel(shape)).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
        self.insert(name, shape, value, true)
    }

    pub fn normal<R: Rng>(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut R) -> ParamId {
        let value = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(z * std)
            })
            .collect();
        self.insert(name, shape, value, true)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.insert(name, shape, vec![T::lit(v); numel(shape)], true)
    }

    pub fn buffer(&mut self, name: &str, shape: &[usize], v: f64) -> ParamId {
        self.insert(name, shape, vec![T::lit(v); numel(shape)], false)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = T::zero());
        }
    }

    pub(crate) fn accumulate_grad(&mut self, id: ParamId, g: &[T]) {
        let p = &mut self.params[id.0];
        if p.trainable {
            p.grad.iter_mut().zip(g).for_each(|(d, &s)| *d += s);
        }
    }

    /// Converts every value to another scalar type.
    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| U::lit(v.as_f64())).collect(),
                    grad: vec![U::zero(); p.grad.len()],
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}
