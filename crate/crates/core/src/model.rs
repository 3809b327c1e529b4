//! The triple-stream network: three residual streams whose pooled features
//! are concatenated and classified by a 16-unit hidden layer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Mode, Param, Parameterized};
use crate::stream::{StreamConfig, StreamWeights};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const NUM_STREAMS: usize = 3;
/// Width of the first fully connected head layer.
pub const HEAD_WIDTH: usize = 16;
/// Class index of malignant tissue in every label encoding.
pub const MALIGNANT: usize = 1;
pub const BENIGN: usize = 0;

/// A network mapping image batches to class logits.
pub trait Classifier<T: Element>: Parameterized<T> {
    fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var>;

    /// Folds train-mode batch statistics from `tape` into running averages
    /// of every layer that is not frozen.
    fn commit_running_stats(&mut self, tape: &Tape<T>);

    fn num_classes(&self) -> usize;

    /// Eval-mode malignancy probability for every image of `x: [N, 3, H, W]`.
    fn predict_batch(&self, x: &Tensor<T>) -> Result<Vec<f64>> {
        let mut tape = Tape::inference();
        let input = tape.constant(x.clone());
        let logits = self.forward(&mut tape, input, Mode::Eval)?;
        Ok(malignant_probabilities(tape.value(logits)))
    }

    fn predict_tile(&self, tile: &Tensor<T>) -> Result<f64> {
        Ok(self.predict_batch(tile)?[0])
    }
}

/// Row-wise softmax of `[N, K]` logits, returning the malignant column.
pub fn malignant_probabilities<T: Element>(logits: &Tensor<T>) -> Vec<f64> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let row: Vec<f64> = row.iter().map(|v| v.to_f64_lossy()).collect();
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = row.iter().map(|v| (v - max).exp()).sum();
            (row[MALIGNANT] - max).exp() / denom
        })
        .collect()
}

/// Which parameter groups are excluded from optimizer updates (and, for
/// streams, from running-statistic updates).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FreezeState {
    pub streams: [bool; NUM_STREAMS],
    pub head: bool,
}

#[derive(Clone, Debug)]
pub struct TriResNet<T> {
    config: StreamConfig,
    num_classes: usize,
    seeds: [u64; NUM_STREAMS],
    head_seed: u64,
    pub streams: [StreamWeights<T>; NUM_STREAMS],
    pub head_fc1: Linear<T>,
    pub head_fc2: Linear<T>,
    proxy_heads: [Option<(u64, Linear<T>)>; NUM_STREAMS],
    freeze: FreezeState,
}

/// Three independently seeded streams plus the classification head. No
/// proxy heads are attached and nothing is frozen.
pub fn build_triresnet<T: Element>(
    config: &StreamConfig,
    num_classes: usize,
    seeds: [u64; NUM_STREAMS],
    head_seed: u64,
) -> Result<TriResNet<T>> {
    TriResNet::new(config, num_classes, seeds, head_seed)
}

impl<T: Element> TriResNet<T> {
    pub fn new(config: &StreamConfig, num_classes: usize, seeds: [u64; NUM_STREAMS], head_seed: u64) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let streams = [
            StreamWeights::build(config, seeds[0], "stream0")?,
            StreamWeights::build(config, seeds[1], "stream1")?,
            StreamWeights::build(config, seeds[2], "stream2")?,
        ];
        let fd = streams[0].feature_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(head_seed);
        let head_fc1 = Linear::new("head.fc1", NUM_STREAMS * fd, HEAD_WIDTH, &mut rng);
        let head_fc2 = Linear::new("head.fc2", HEAD_WIDTH, num_classes, &mut rng);
        Ok(Self {
            config: config.clone(),
            num_classes,
            seeds,
            head_seed,
            streams,
            head_fc1,
            head_fc2,
            proxy_heads: [None, None, None],
            freeze: FreezeState::default(),
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn seeds(&self) -> [u64; NUM_STREAMS] {
        self.seeds
    }

    pub fn head_seed(&self) -> u64 {
        self.head_seed
    }

    pub fn feature_dim(&self) -> usize {
        self.streams[0].feature_dim()
    }

    pub fn freeze_state(&self) -> FreezeState {
        self.freeze
    }

    /// Concatenated pooled features `[N, 3·feature_dim]`, streams in order.
    pub fn features(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let parts = [
            self.streams[0].forward(tape, x, mode)?,
            self.streams[1].forward(tape, x, mode)?,
            self.streams[2].forward(tape, x, mode)?,
        ];
        tape.concat_features(&parts)
    }

    /// Logits through stream `idx` and its proxy head only.
    pub fn forward_proxy(&self, idx: usize, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let head = self.proxy_head(idx)?;
        let f = self.streams[idx].forward(tape, x, mode)?;
        head.forward(tape, f)
    }

    pub fn proxy_head(&self, idx: usize) -> Result<&Linear<T>> {
        check_index(idx)?;
        self.proxy_heads[idx]
            .as_ref()
            .map(|(_, l)| l)
            .ok_or_else(|| Error::State(format!("no proxy head attached to stream {idx}")))
    }

    pub fn proxy_seed(&self, idx: usize) -> Option<u64> {
        self.proxy_heads.get(idx)?.as_ref().map(|(s, _)| *s)
    }

    pub fn has_proxy_head(&self, idx: usize) -> bool {
        self.proxy_heads.get(idx).is_some_and(Option::is_some)
    }

    pub fn attach_proxy_head(&mut self, idx: usize, seed: u64) -> Result<()> {
        check_index(idx)?;
        if self.proxy_heads[idx].is_some() {
            return Err(Error::State(format!("stream {idx} already has a proxy head")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let head = Linear::new(&format!("proxy{idx}"), self.feature_dim(), self.num_classes, &mut rng);
        self.proxy_heads[idx] = Some((seed, head));
        Ok(())
    }

    /// Removes and discards the proxy head of stream `idx`.
    pub fn detach_proxy_head(&mut self, idx: usize) -> Result<()> {
        check_index(idx)?;
        self.proxy_heads[idx]
            .take()
            .map(|_| ())
            .ok_or_else(|| Error::State(format!("no proxy head attached to stream {idx}")))
    }

    pub fn set_stream_frozen(&mut self, idx: usize, frozen: bool) {
        self.streams[idx].set_requires_grad(!frozen);
        self.freeze.streams[idx] = frozen;
    }

    pub fn set_head_frozen(&mut self, frozen: bool) {
        self.head_fc1.visit_params_mut(&mut |p| p.set_requires_grad(!frozen));
        self.head_fc2.visit_params_mut(&mut |p| p.set_requires_grad(!frozen));
        self.freeze.head = frozen;
    }

    pub fn set_freeze_state(&mut self, state: FreezeState) {
        for i in 0..NUM_STREAMS {
            self.set_stream_frozen(i, state.streams[i]);
        }
        self.set_head_frozen(state.head);
    }
}

fn check_index(idx: usize) -> Result<()> {
    if idx < NUM_STREAMS {
        Ok(())
    } else {
        Err(Error::State(format!("stream index {idx} out of range")))
    }
}

impl<T: Element> Classifier<T> for TriResNet<T> {
    /// `fc2(relu(fc1(concat(s0(x), s1(x), s2(x)))))`; proxy heads never
    /// participate.
    fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let f = self.features(tape, x, mode)?;
        let h = self.head_fc1.forward(tape, f)?;
        let h = tape.relu(h)?;
        self.head_fc2.forward(tape, h)
    }

    fn commit_running_stats(&mut self, tape: &Tape<T>) {
        for (stream, frozen) in self.streams.iter_mut().zip(self.freeze.streams) {
            if !frozen {
                stream.commit_running_stats(tape);
            }
        }
    }

    fn num_classes(&self) -> usize {
        self.num_classes
    }
}

impl<T: Element> Parameterized<T> for TriResNet<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        for s in &self.streams {
            s.visit_params(f);
        }
        self.head_fc1.visit_params(f);
        self.head_fc2.visit_params(f);
        for (_, p) in self.proxy_heads.iter().flatten() {
            p.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        for s in &mut self.streams {
            s.visit_params_mut(f);
        }
        self.head_fc1.visit_params_mut(f);
        self.head_fc2.visit_params_mut(f);
        for (_, p) in self.proxy_heads.iter_mut().flatten() {
            p.visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for s in &self.streams {
            s.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for s in &mut self.streams {
            s.visit_buffers_mut(f);
        }
    }
}
