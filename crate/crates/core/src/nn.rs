//! Layers with trainable parameters and a visitor used by the optimizer and
//! checkpointing.

use std::cell::{Cell, RefCell};

use casn_grad::{Array, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// A named piece of model state.
pub enum Slot<'a> {
    Param(&'a mut Tensor),
    Buffer(&'a mut Array),
}

pub trait Module {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>));
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Array {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        })
        .collect();
    Array::new(shape.to_vec(), data)
}

pub struct Conv2d {
    pub weight: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    /// He-normal initialised, bias-free (a batch norm always follows).
    pub fn new(rng: &mut ChaCha8Rng, cin: usize, cout: usize, kernel: usize, stride: usize) -> Self {
        let fan_in = (cin * kernel * kernel) as f64;
        Self {
            weight: Tensor::variable(normal(rng, &[cout, cin, kernel, kernel], (2.0 / fan_in).sqrt())),
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.conv2d(&self.weight, self.stride, self.pad)
    }
}

impl Module for Conv2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
    }
}

pub struct BatchNorm2d {
    pub gamma: Tensor,
    pub beta: Tensor,
    running_mean: RefCell<Array>,
    running_var: RefCell<Array>,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        let shape = [1, channels, 1, 1];
        Self {
            gamma: Tensor::variable(Array::ones(&shape)),
            beta: Tensor::variable(Array::zeros(&shape)),
            running_mean: RefCell::new(Array::zeros(&shape)),
            running_var: RefCell::new(Array::ones(&shape)),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// In training mode normalises with batch statistics and updates the
    /// running estimates; otherwise uses the running estimates.
    pub fn forward(&self, x: &Tensor, training: bool) -> Tensor {
        if !training {
            let mean = Tensor::constant(self.running_mean.borrow().clone());
            let inv_std = Tensor::constant(self.running_var.borrow().map(|v| 1.0 / (v + self.eps).sqrt()));
            return x.sub(&mean).mul(&inv_std).mul(&self.gamma).add(&self.beta);
        }
        let axes = [0, 2, 3];
        let mean = x.mean_axes(&axes);
        let centered = x.sub(&mean);
        let var = centered.square().mean_axes(&axes);
        let xhat = centered.div(&var.add_scalar(self.eps).sqrt());

        let n = (x.shape()[0] * x.shape()[2] * x.shape()[3]) as f64;
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let m = self.momentum;
        let rm = self.running_mean.borrow().zip_broadcast(mean.value(), |r, b| (1.0 - m) * r + m * b);
        let rv = self
            .running_var
            .borrow()
            .zip_broadcast(var.value(), |r, b| (1.0 - m) * r + m * b * unbias);
        *self.running_mean.borrow_mut() = rm;
        *self.running_var.borrow_mut() = rv;

        xhat.mul(&self.gamma).add(&self.beta)
    }
}

impl Module for BatchNorm2d {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "gamma"), Slot::Param(&mut self.gamma));
        f(&join(prefix, "beta"), Slot::Param(&mut self.beta));
        f(&join(prefix, "running_mean"), Slot::Buffer(self.running_mean.get_mut()));
        f(&join(prefix, "running_var"), Slot::Buffer(self.running_var.get_mut()));
    }
}

/// Affine map `x·W + b` on `[N, in]` rows.
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        Self {
            weight: Tensor::variable(normal(rng, &[fan_in, fan_out], (gain / fan_in as f64).sqrt())),
            bias: Tensor::variable(Array::zeros(&[1, fan_out])),
        }
    }

    pub fn from_arrays(weight: Array, bias: Array) -> Self {
        Self {
            weight: Tensor::variable(weight),
            bias: Tensor::variable(bias),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        x.matmul(&self.weight).add(&self.bias)
    }
}

impl Module for Linear {
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, Slot<'_>)) {
        f(&join(prefix, "weight"), Slot::Param(&mut self.weight));
        f(&join(prefix, "bias"), Slot::Param(&mut self.bias));
    }
}

/// Whether batch norms use batch statistics.
#[derive(Debug, Default)]
pub struct ModeFlag(Cell<bool>);

impl ModeFlag {
    pub fn training(&self) -> bool {
        self.0.get()
    }

    pub fn set(&self, training: bool) {
        self.0.set(training);
    }
}

pub(crate) fn child(prefix: &str, name: &str) -> String {
    join(prefix, name)
}
