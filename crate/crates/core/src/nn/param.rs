use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};

/// A trainable tensor with its optimizer slots.
#[derive(Clone, Debug)]
pub struct Parameter<T> {
    name: String,
    pub value: Tensor<T>,
    pub(crate) first_moment: Vec<T>,
    pub(crate) second_moment: Vec<T>,
    pub(crate) step: u64,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let n = value.numel();
        Parameter {
            name: name.into(),
            value,
            first_moment: vec![T::zero(); n],
            second_moment: vec![T::zero(); n],
            step: 0,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn data(&self) -> &[T] {
        self.value.data()
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.value.grad()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, delta: &[T]) {
        let g = self.value.grad_or_zeros();
        debug_assert_eq!(g.len(), delta.len());
        g.iter_mut().zip(delta).for_each(|(g, d)| *g += *d);
    }

    pub fn set_grad(&mut self, grad: Vec<T>) -> Result<()> {
        self.value.set_grad(grad)
    }

    /// Explicit zeroing between steps; the buffer stays allocated.
    pub fn zero_grad(&mut self) {
        if let Some(g) = self.value.grad_mut() {
            g.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub(crate) fn require_grad(&self) -> Result<&[T]> {
        self.value
            .grad()
            .ok_or_else(|| Error::UninitializedGradient(self.name.clone()))
    }
}
