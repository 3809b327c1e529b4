//! Single-stream reference network: one residual stream and a linear
//! classifier, the conventional counterpart to the triple-stream model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::nn::{Linear, Mode, Param, Parameterized};
use crate::stream::{StreamConfig, StreamWeights};
use crate::tensor::{Element, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SingleStreamModel<T> {
    config: StreamConfig,
    num_classes: usize,
    seed: u64,
    head_seed: u64,
    /// Named like the first stream of a triple-stream model so parameter
    /// sets can be compared name by name.
    pub stream: StreamWeights<T>,
    pub fc: Linear<T>,
}

/// Builds the baseline; training it is the ordinary loop in
/// [`crate::train::train_baseline`].
pub fn single_stream_baseline<T: Element>(
    config: &StreamConfig,
    num_classes: usize,
    seed: u64,
    head_seed: u64,
) -> Result<SingleStreamModel<T>> {
    SingleStreamModel::new(config, num_classes, seed, head_seed)
}

impl<T: Element> SingleStreamModel<T> {
    pub fn new(config: &StreamConfig, num_classes: usize, seed: u64, head_seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let stream = StreamWeights::build(config, seed, "stream0")?;
        let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
        let fc = Linear::new("head.fc", stream.feature_dim(), num_classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            num_classes,
            seed,
            head_seed,
            stream,
            fc,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn head_seed(&self) -> u64 {
        self.head_seed
    }
}

impl<T: Element> Classifier<T> for SingleStreamModel<T> {
    fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let f = self.stream.forward(tape, x, mode)?;
        self.fc.forward(tape, f)
    }

    fn commit_running_stats(&mut self, tape: &Tape<T>) {
        self.stream.commit_running_stats(tape);
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

impl<T: Element> Parameterized<T> for SingleStreamModel<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stream.visit_params(f);
        self.fc.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stream.visit_params_mut(f);
        self.fc.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stream.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stream.visit_buffers_mut(f);
    }
}
