use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Real;

/// A trainable tensor together with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub grad: Vec<T>,
}

impl<T: Real> Param<T> {
    pub fn constant(name: impl Into<String>, shape: Vec<usize>, value: T) -> Self {
        let len = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            value: vec![value; len],
            grad: vec![T::zero(); len],
        }
    }

    /// He-normal initialization with the given fan-in.
    pub fn kaiming<R: Rng>(name: impl Into<String>, shape: Vec<usize>, fan_in: usize, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let value = (0..len).map(|_| T::from_f64(normal.sample(rng))).collect();
        Self {
            name: name.into(),
            shape,
            value,
            grad: vec![T::zero(); len],
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = T::zero());
    }
}
