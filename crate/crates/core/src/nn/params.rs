use std::collections::BTreeMap;

use rand_distr::{Distribution, StandardNormal};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S: Scalar = f32> {
    pub value: Tensor<S>,
    pub trainable: bool,
}

/// Named parameters, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParameterStore<S: Scalar = f32> {
    params: BTreeMap<String, Param<S>>,
}

impl<S: Scalar> ParameterStore<S> {
    pub fn new() -> Self {
        ParameterStore {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Input(format!("duplicate parameter `{name}`")));
        }
        self.params.insert(
            name,
            Param {
                value,
                trainable: true,
            },
        );
        Ok(())
    }

    /// Inserts or replaces, keeping the trainable flag of an existing entry.
    pub fn set(&mut self, name: &str, value: Tensor<S>) {
        match self.params.get_mut(name) {
            Some(p) => p.value = value,
            None => {
                self.params.insert(
                    name.to_string(),
                    Param {
                        value,
                        trainable: true,
                    },
                );
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param<S>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<S>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Param<S>> {
        self.params.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param<S>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param<S>)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    /// Number of scalars under a name prefix.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.value.numel())
            .sum()
    }

    pub fn has_prefix(&self, prefix: &str) -> bool {
        self.params.keys().any(|n| n.starts_with(prefix))
    }

    /// Marks parameters trainable iff their name starts with one of `prefixes`.
    pub fn set_trainable_prefixes(&mut self, prefixes: &[String]) {
        for (name, p) in self.params.iter_mut() {
            p.trainable = prefixes.iter().any(|pre| name.starts_with(pre.as_str()));
        }
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in self.params.values_mut() {
            p.trainable = trainable;
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParameterStore<T> {
        ParameterStore {
            params: self
                .params
                .iter()
                .map(|(n, p)| {
                    (
                        n.clone(),
                        Param {
                            value: p.value.cast(),
                            trainable: p.trainable,
                        },
                    )
                })
                .collect(),
        }
    }

    /// Copies every parameter under `from` to the same suffix under `to`.
    pub fn copy_prefix(&mut self, from: &str, to: &str) -> usize {
        let copies: Vec<(String, Param<S>)> = self
            .params
            .iter()
            .filter_map(|(n, p)| n.strip_prefix(from).map(|s| (format!("{to}{s}"), p.clone())))
            .collect();
        let n = copies.len();
        for (name, p) in copies {
            self.params.insert(name, p);
        }
        n
    }

    /// Bitwise comparison of the tensors under `a_prefix` and `b_prefix`.
    pub fn prefix_bit_eq(&self, a_prefix: &str, other: &ParameterStore<S>, b_prefix: &str) -> bool {
        let a: Vec<_> = self
            .params
            .iter()
            .filter_map(|(n, p)| n.strip_prefix(a_prefix).map(|s| (s, p)))
            .collect();
        let b: Vec<_> = other
            .params
            .iter()
            .filter_map(|(n, p)| n.strip_prefix(b_prefix).map(|s| (s, p)))
            .collect();
        a.len() == b.len()
            && a
                .iter()
                .zip(&b)
                .all(|((na, pa), (nb, pb))| na == nb && pa.value.bit_eq(&pb.value))
    }

    /// Adds the parameters of `other` not yet present here.
    pub fn merge_missing(&mut self, other: &ParameterStore<S>) {
        for (n, p) in &other.params {
            self.params.entry(n.clone()).or_insert_with(|| p.clone());
        }
    }
}

/// Weight initializers drawing from a named RNG stream.
pub struct Init<'a> {
    pub rng: &'a mut RngStream,
}

impl Init<'_> {
    pub fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng.inner());
                (z * std) as f32
            })
            .collect();
        Tensor::from_vec(shape, data).expect("init shape")
    }

    /// Xavier-uniform style scale for a `[fan_in, fan_out]` weight.
    pub fn linear(&mut self, fan_in: usize, fan_out: usize) -> Tensor<f32> {
        let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
        self.normal(&[fan_in, fan_out], std)
    }
}
