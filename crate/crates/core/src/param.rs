//! Named trainable parameters.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<F> {
    pub name: String,
    pub trainable: bool,
    value: Arc<Tensor<F>>,
    grad: Tensor<F>,
}

impl<F: Scalar> Parameter<F> {
    pub fn value(&self) -> &Tensor<F> {
        &self.value
    }

    pub(crate) fn shared_value(&self) -> Arc<Tensor<F>> {
        Arc::clone(&self.value)
    }

    /// Mutable access to the values. Copies on write if a graph still holds them.
    pub fn value_mut(&mut self) -> &mut Tensor<F> {
        Arc::make_mut(&mut self.value)
    }

    pub fn grad(&self) -> &Tensor<F> {
        &self.grad
    }

    pub fn grad_mut(&mut self) -> &mut Tensor<F> {
        &mut self.grad
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

/// Every parameter of one model, in registration order. Names are unique.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<F> {
    params: Vec<Parameter<F>>,
    by_name: HashMap<String, ParamId>,
}

impl<F: Scalar> ParamSet<F> {
    pub fn new() -> Self {
        ParamSet {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<F>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            trainable: true,
            value: Arc::new(value),
            grad,
        });
        self.by_name.insert(name, id);
        Ok(id)
    }

    /// Adds a parameter initialised from N(0, std²).
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        std: f64,
        rng: &mut R,
    ) -> Result<ParamId> {
        let normal = Normal::new(0.0, std).map_err(|e| Error::Config(e.to_string()))?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| F::lit(normal.sample(rng))).collect();
        self.add(name, Tensor::new(shape, data)?)
    }

    pub fn add_constant(&mut self, name: impl Into<String>, shape: &[usize], v: f64) -> Result<ParamId> {
        let n: usize = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![F::lit(v); n])?)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<F> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<F> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<F>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<F>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<F>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.fill(F::zero());
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Converts every value to another precision (gradients are reset).
    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        let mut out = ParamSet::new();
        for p in &self.params {
            let id = out.add(p.name.clone(), p.value.cast()).expect("names already unique");
            out.get_mut(id).trainable = p.trainable;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::<f32>::new();
        ps.add_constant("w", &[2], 0.0).unwrap();
        assert!(ps.add_constant("w", &[3], 0.0).is_err());
        assert_eq!(ps.len(), 1);
    }

    #[test]
    fn normal_init_is_seeded() {
        let mut a = ParamSet::<f32>::new();
        let mut b = ParamSet::<f32>::new();
        a.add_normal("w", &[4, 4], 0.02, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        b.add_normal("w", &[4, 4], 0.02, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.get(ParamId(0)).value(), b.get(ParamId(0)).value());
    }

    #[test]
    fn grad_matches_value_shape() {
        let mut ps = ParamSet::<f64>::new();
        let id = ps.add_constant("w", &[3, 2], 1.0).unwrap();
        assert_eq!(ps.get(id).grad().shape(), &[3, 2]);
    }
}
