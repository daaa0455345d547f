use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered collection of named parameter arrays.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn normal(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
        self.insert(name, Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize]) -> ParamId {
        self.insert(name, Tensor::zeros(shape))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(Tensor::all_finite)
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound(self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect())
    }

    /// Checks that `other` has the same names and shapes, then copies its values.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format("parameter names differ from the architecture".into()));
        }
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape != b.shape {
                return Err(Error::Format(format!(
                    "parameter shape {:?} does not match architecture {:?}",
                    b.shape, a.shape
                )));
            }
        }
        self.values.clone_from(&other.values);
        Ok(())
    }
}

/// Tape variables for every parameter of a [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Bound(Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    /// Collects gradients per parameter; missing gradients become zeros.
    pub fn grads(&self, store: &ParamStore, grads: &mut Grads) -> Vec<Tensor> {
        self.0
            .iter()
            .zip(store.ids())
            .map(|(v, id)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(&store.get(id).shape)))
            .collect()
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}
