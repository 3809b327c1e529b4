//! Trainable parameters and the layers built from tape primitives.

mod layers;

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::tensor::{Element, Tensor};

pub use layers::{BatchNorm2d, Conv2d, Linear, BN_EPS, BN_MOMENTUM};

/// Whether batch norms use batch statistics (and report them for running
/// averages) or their stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A named trainable tensor. `grad` is `None` until a backward pass
/// populates it and again after it is zeroed.
#[derive(Clone, Debug)]
pub struct Param<T> {
    name: String,
    pub value: Tensor<T>,
    grad: Option<Tensor<T>>,
    requires_grad: bool,
}

impl<T: Element> Param<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            requires_grad: true,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn grad(&self) -> Option<&Tensor<T>> {
        self.grad.as_ref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Turning gradients off also discards any accumulated gradient.
    pub fn set_requires_grad(&mut self, on: bool) {
        self.requires_grad = on;
        if !on {
            self.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) {
        match &mut self.grad {
            Some(acc) => acc.add_assign(g).expect("gradient shape matches parameter"),
            None => self.grad = Some(g.clone()),
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub(crate) fn take_grad(&mut self) -> Option<Tensor<T>> {
        self.grad.take()
    }
}

/// Anything owning named parameters and (optionally) non-trainable buffers.
/// Visiting order is stable and defines checkpoint layout.
pub trait Parameterized<T: Element> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>));

    /// Non-trainable state such as batch-norm running statistics.
    fn visit_buffers(&self, _f: &mut dyn FnMut(&str, &Tensor<T>)) {}
    fn visit_buffers_mut(&mut self, _f: &mut dyn FnMut(&str, &mut Tensor<T>)) {}

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value.numel());
        n
    }

    fn buffer_count(&self) -> usize {
        let mut n = 0;
        self.visit_buffers(&mut |_, t| n += t.numel());
        n
    }

    /// Every parameter followed by every buffer, cloned with its name.
    fn state_snapshot(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.push((p.name().to_owned(), p.value.clone())));
        self.visit_buffers(&mut |n, t| out.push((n.to_owned(), t.clone())));
        out
    }
}

/// Normal(0, √(2 / fan_in)) initialization for convolutions.
pub fn he_normal<T: Element>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape and count agree")
}

/// Uniform(±1/√fan_in) initialization for fully connected layers.
pub fn uniform_fan_in<T: Element>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(dist.sample(rng))).collect();
    Tensor::from_vec(shape.to_vec(), data).expect("shape and count agree")
}
