//! Named parameter storage shared by the model, the optimizer and checkpoints.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Result, SmarcError};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct Parameter<T: Real = f32> {
    /// Dotted path, e.g. `enc2.pconv1.weight`.
    pub name: String,
    pub tensor: Tensor<T>,
    /// Kernels take L2 weight decay; biases do not.
    pub decay: bool,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T: Real = f32> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor<T>, decay: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(SmarcError::invalid("ParamStore::add", format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter { name, tensor, decay });
        Ok(id)
    }

    /// He-uniform kernel: `U(−√(6/fan_in), √(6/fan_in))`.
    pub fn add_kernel<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut R,
    ) -> Result<ParamId> {
        let limit = (6.0 / fan_in.max(1) as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::lit(rng.random_range(-limit..limit)));
        self.add(name, t, true)
    }

    pub fn add_bias(&mut self, name: impl Into<String>, len: usize) -> Result<ParamId> {
        self.add(name, Tensor::zeros(&[len]), false)
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total number of scalar elements across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                    decay: p.decay,
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    /// Copy every tensor from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for p in &mut self.params {
            let id = other.id(&p.name).ok_or_else(|| {
                SmarcError::invalid("ParamStore::load_from", format!("missing parameter {}", p.name))
            })?;
            let src = &other.get(id).tensor;
            if src.shape() != p.tensor.shape() {
                return Err(SmarcError::shape("ParamStore::load_from", p.tensor.shape(), src.shape()));
            }
            p.tensor = src.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::<f32>::new();
        s.add_bias("a.bias", 3).unwrap();
        assert!(s.add_bias("a.bias", 3).is_err());
    }

    #[test]
    fn he_uniform_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = ParamStore::<f32>::new();
        let id = s.add_kernel("w", &[3, 3, 4, 8], 36, &mut rng).unwrap();
        let limit = (6.0f32 / 36.0).sqrt();
        assert!(s.get(id).tensor.data().iter().all(|v| v.abs() <= limit));
        assert!(s.get(id).decay);
        assert_eq!(s.numel(), 288);
    }
}
