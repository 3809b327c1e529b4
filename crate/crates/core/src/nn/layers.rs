use rand::Rng;

use super::{he_normal, uniform_fan_in, Mode, Param, Parameterized};
use crate::error::Result;
use crate::tensor::{BnMode, Element, Tape, Tensor, Var};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Bias-free convolution (every convolution in a stream feeds a batch norm).
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub weight: Param<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Element> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: Param::new(
                format!("{name}.weight"),
                he_normal(rng, &[out_ch, in_ch, kernel, kernel], fan_in),
            ),
            stride,
            padding,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        tape.conv2d(x, w, None, self.stride, self.padding)
    }
}

impl<T: Element> Parameterized<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm2d<T> {
    name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

impl<T: Element> BatchNorm2d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            name: name.to_owned(),
            gamma: Param::new(format!("{name}.gamma"), Tensor::ones([channels])),
            beta: Param::new(format!("{name}.beta"), Tensor::zeros([channels])),
            running_mean: Tensor::zeros([channels]),
            running_var: Tensor::ones([channels]),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// In train mode the batch statistics are recorded on the tape under this
    /// layer's name; [`BatchNorm2d::commit_running_stats`] folds them in.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let g = tape.param(&self.gamma);
        let b = tape.param(&self.beta);
        let bn_mode = match mode {
            Mode::Train => BnMode::Train { eps: BN_EPS },
            Mode::Eval => BnMode::Eval {
                running_mean: &self.running_mean,
                running_var: &self.running_var,
                eps: BN_EPS,
            },
        };
        let (y, stats) = tape.batch_norm2d(x, g, b, bn_mode)?;
        if let Some(stats) = stats {
            tape.record_batch_stats(&self.name, stats);
        }
        Ok(y)
    }

    /// Exponential moving average update from the statistics this layer
    /// recorded on `tape`. Returns whether anything was recorded.
    pub fn commit_running_stats(&mut self, tape: &Tape<T>) -> bool {
        let Some(stats) = tape.batch_stats(&self.name) else {
            return false;
        };
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for (r, &s) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = keep * *r + m * s;
        }
        for (r, &s) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = keep * *r + m * s;
        }
        true
    }
}

impl<T: Element> Parameterized<T> for BatchNorm2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f(&format!("{}.running_mean", self.name), &self.running_mean);
        f(&format!("{}.running_var", self.name), &self.running_var);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f(&format!("{}.running_mean", self.name), &mut self.running_mean);
        f(&format!("{}.running_var", self.name), &mut self.running_var);
    }
}

#[derive(Clone, Debug)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Element> Linear<T> {
    pub fn new(name: &str, inputs: usize, outputs: usize, rng: &mut impl Rng) -> Self {
        let weight = uniform_fan_in(rng, &[outputs, inputs], inputs);
        let bias = uniform_fan_in(rng, &[outputs], inputs);
        Self {
            weight: Param::new(format!("{name}.weight"), weight),
            bias: Param::new(format!("{name}.bias"), bias),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(x, w, b)
    }
}

impl<T: Element> Parameterized<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
