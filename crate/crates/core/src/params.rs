//! Named parameter registry shared by every learnable component.

use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{lit, Real, Tensor};

/// Flat, name-ordered map of learnable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Default for ModelParams<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ModelParams<T> {
    pub fn new() -> Self {
        ModelParams {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter `{name}`")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.tensors
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter `{name}`")))
    }

    /// Replaces an existing tensor, which must keep its dims.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self.get_mut(name)?;
        if slot.dims() != t.dims() {
            return Err(Error::shape(format!(
                "`{name}` has dims {:?}, got {:?}",
                slot.dims(),
                t.dims()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|(_, t)| !t.all_finite())
            .map(|(n, _)| n.as_str())
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Registers every tensor as a named leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Result<Bound> {
        let mut vars = HashMap::with_capacity(self.tensors.len());
        for (name, t) in &self.tensors {
            vars.insert(name.clone(), tape.param(name, t.clone())?);
        }
        Ok(Bound { vars })
    }

    /// Registers every tensor as a constant, for inference without gradients.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.constant(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Scalar parameter count of a registry.
pub fn count_params<T: Real>(params: &ModelParams<T>) -> usize {
    params.count()
}

/// Parameter name → tape variable for one forward pass.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Argument(format!("parameter `{name}` is not bound")))
    }
}

/// Uniform in `±sqrt(6 / fan_in)`, the ReLU-gain fan-in scheme.
pub fn kaiming_uniform<T: Real>(dims: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| lit(rng.random_range(-bound..bound))).collect();
    Tensor::new(dims, data).expect("dims are non-zero")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn counts() {
        let empty = ModelParams::<f64>::new();
        assert_eq!(count_params(&empty), 0);
        let mut p = ModelParams::<f64>::new();
        p.insert("conv.weight", Tensor::zeros(&[3, 3, 1, 8])).unwrap();
        p.insert("conv.bias", Tensor::zeros(&[8])).unwrap();
        assert_eq!(count_params(&p), 80);
        assert!(p.insert("conv.bias", Tensor::zeros(&[8])).is_err());
    }

    #[test]
    fn set_keeps_dims() {
        let mut p = ModelParams::<f32>::new();
        p.insert("w", Tensor::zeros(&[2])).unwrap();
        assert!(p.set("w", Tensor::zeros(&[3])).is_err());
        assert!(p.set("w", Tensor::full(&[2], 1.0)).is_ok());
    }

    #[test]
    fn kaiming_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = kaiming_uniform::<f64>(&[6, 4], 6, &mut rng);
        assert!(t.data().iter().all(|v| v.abs() < 1.0));
    }
}
