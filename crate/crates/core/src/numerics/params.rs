use std::collections::HashMap;

use rand::Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named trainable tensors, in registration order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let grad = Tensor::new(value.shape().to_vec(), vec![0.0; value.len()])?;
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
        });
        self.index.insert(name, id);
        Ok(id)
    }

    /// Adds a `rows x cols` parameter drawn from the Glorot uniform range.
    pub fn add_glorot<R: Rng>(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut R) -> Result<ParamId> {
        self.add(name, glorot_uniform(rows, cols, rng))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Adds `scale * grads` into the stored gradients.
    pub fn accumulate(&mut self, grads: &Gradients, scale: f64) {
        for (p, g) in self.params.iter_mut().zip(&grads.grads) {
            if let Some(g) = g {
                for (a, b) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *a += scale * b;
                }
            }
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.data())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales stored gradients so their global norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.data_mut().iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }
}

/// Sparse per-parameter gradient buffers produced by one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn new(num_params: usize) -> Self {
        Self {
            grads: vec![None; num_params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub(crate) fn slot(&mut self, id: ParamId, like: &Tensor) -> &mut Tensor {
        self.grads[id.0].get_or_insert_with(|| Tensor::new(like.shape().to_vec(), vec![0.0; like.len()]).expect("shape from existing tensor"))
    }

    /// Adds another gradient set into this one.
    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => {
                    for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                        *x += y;
                    }
                }
                (None, Some(b)) => *a = Some(b.clone()),
                _ => {}
            }
        }
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::matrix(rows, cols, data).expect("sized by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn unique_names() {
        let mut s = ParamStore::new();
        s.add("w", Tensor::zeros(2, 2)).unwrap();
        assert!(s.add("w", Tensor::zeros(1, 1)).is_err());
    }

    #[test]
    fn glorot_bound() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let t = glorot_uniform(10, 20, &mut rng);
        let b = (6.0f64 / 30.0).sqrt();
        assert!(t.data().iter().all(|v| v.abs() <= b));
    }

    #[test]
    fn clipping() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::zeros(1, 2)).unwrap();
        s.params_mut()[id.index()].grad = Tensor::row_vector(vec![3.0, 4.0]);
        assert_eq!(s.clip_grad_norm(1.0), 5.0);
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
    }
}
