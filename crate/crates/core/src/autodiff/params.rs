use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::tape::{Gradients, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Whether decoupled weight decay applies (off for biases and norm gains).
    pub decay: bool,
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, idx: usize) -> &Tensor {
        &self.params[idx].value
    }

    pub fn get_mut(&mut self, idx: usize) -> &mut Tensor {
        &mut self.params[idx].value
    }

    pub fn name(&self, idx: usize) -> &str {
        &self.params[idx].name
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor, decay: bool) -> usize {
        self.params.push(Param {
            name: name.into(),
            value,
            decay,
        });
        self.params.len() - 1
    }

    /// Truncated-normal-free Gaussian init scaled by `std`.
    pub fn push_normal(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut Rng,
    ) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                z * std
            })
            .collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape product");
        self.push(name, t, true)
    }

    pub fn push_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        rng: &mut Rng,
    ) -> usize {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("shape product");
        self.push(name, t, true)
    }

    pub fn push_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> usize {
        self.push(name, Tensor::full(shape, value), false)
    }

    /// Enters every parameter on `tape`; trainable ones become leaves.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect()
    }

    /// Collects gradients for bound parameters; absent gradients become zeros.
    pub fn collect_grads(&self, bound: &[Var], grads: &mut Gradients) -> Vec<Tensor> {
        self.params
            .iter()
            .zip(bound)
            .map(|(p, &v)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.value.shape())))
            .collect()
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.name == b.name && a.value.shape() == b.value.shape())
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// `self ← m·self + (1−m)·other`, elementwise.
    pub fn ema_from(&mut self, other: &ParamSet, momentum: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::shape("ema_update", "parameter layouts differ"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!("momentum {momentum}")));
        }
        for (t, s) in self.params.iter_mut().zip(&other.params) {
            if momentum == 1.0 {
                continue;
            }
            if momentum == 0.0 {
                t.value = s.value.clone();
                continue;
            }
            for (a, b) in t.value.data_mut().iter_mut().zip(s.value.data()) {
                *a = momentum * *a + (1.0 - momentum) * b;
            }
        }
        Ok(())
    }
}

/// Sums per-instance gradient lists in order.
pub fn sum_grads(mut parts: impl Iterator<Item = Vec<Tensor>>) -> Option<Vec<Tensor>> {
    let mut acc = parts.next()?;
    for part in parts {
        for (a, b) in acc.iter_mut().zip(&part) {
            a.add_assign(b);
        }
    }
    Some(acc)
}
