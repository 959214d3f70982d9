//! Named parameter storage shared by models, optimizers and checkpoints.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, i: usize) -> &Tensor {
        &self.values[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.values[i]
    }

    pub fn name(&self, i: usize) -> &str {
        &self.names[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.values[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    /// Total number of real degrees of freedom.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|t| if t.is_real() { t.len() } else { 2 * t.len() }).sum()
    }

    /// Puts every parameter on the tape; trainable ones record gradients.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect()
    }

    /// Replaces values by name, checking shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        for (name, t) in other.iter() {
            let i = self
                .index_of(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}`")))?;
            if self.values[i].shape() != t.shape() || self.values[i].is_real() != t.is_real() {
                return Err(Error::shape("load_from", self.values[i].shape(), t.shape()));
            }
            self.values[i] = t.clone();
        }
        Ok(())
    }
}

/// He-normal weights `[fan_in, fan_out]` for a ReLU layer.
pub fn he_dense(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Tensor {
    gaussian(&[fan_in, fan_out], (2.0 / fan_in as f64).sqrt(), rng)
}

pub fn gaussian(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::real(shape, v).expect("length matches")
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::real(shape, v).expect("length matches")
}
