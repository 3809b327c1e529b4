//! One residual stream: a ResNet-34-layout feature extractor.
//!
//! Stem (7×7/2 conv, batch norm, ReLU, 3×3/2 max pool), four stages of
//! basic two-convolution blocks at widths `base · {1, 2, 4, 8} · scale`
//! (stride 2 entering stages 2–4), then a global average pool.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::nn::{BatchNorm2d, Conv2d, Mode, Param, Parameterized};
use crate::tensor::{Element, Tape, Tensor, Var};

/// Smallest input side that survives the stem and three stride-2 stages.
pub const MIN_INPUT_SIDE: usize = 32;

const STAGE_MULTIPLIERS: [usize; 4] = [1, 2, 4, 8];

/// Positive rational width multiplier, written `num/den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scale {
    pub num: u32,
    pub den: u32,
}

impl Scale {
    pub const ONE: Scale = Scale { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(Error::Config(format!("scale {num}/{den} must be positive")));
        }
        Ok(Self { num, den })
    }

    pub fn apply(self, width: usize) -> usize {
        width * self.num as usize / self.den as usize
    }
}

impl fmt::Display for Scale {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

impl FromStr for Scale {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("scale {s:?} is not of the form N or N/D"));
        let (n, d) = match s.trim().split_once('/') {
            Some((n, d)) => (n.trim(), d.trim()),
            None => (s.trim(), "1"),
        };
        Scale::new(n.parse().map_err(|_| bad())?, d.parse().map_err(|_| bad())?)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StreamConfig {
    pub stage_depths: [usize; 4],
    pub base_width: usize,
    pub in_channels: usize,
    pub scale: Scale,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            stage_depths: [3, 4, 6, 3],
            base_width: 64,
            in_channels: 3,
            scale: Scale::ONE,
        }
    }
}

impl StreamConfig {
    /// Depths `[1, 1, 1, 1]` at one eighth width: the desk-scale stream.
    pub fn tiny() -> Self {
        Self {
            stage_depths: [1, 1, 1, 1],
            scale: Scale { num: 1, den: 8 },
            ..Self::default()
        }
    }

    pub fn stage_widths(&self) -> Result<[usize; 4]> {
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be positive".into()));
        }
        let mut out = [0; 4];
        for (w, m) in out.iter_mut().zip(STAGE_MULTIPLIERS) {
            *w = self.scale.apply(self.base_width * m);
            if *w == 0 {
                return Err(Error::Config(format!(
                    "width {}·{m} scaled by {} is below 1",
                    self.base_width, self.scale
                )));
            }
        }
        Ok(out)
    }

    /// Width of the pooled feature vector.
    pub fn feature_dim(&self) -> Result<usize> {
        let widths = self.stage_widths()?;
        let last = (0..4).rev().find(|&s| self.stage_depths[s] > 0);
        Ok(last.map_or(widths[0], |s| widths[s]))
    }
}

/// Weighted layers in one stream plus the classifier it would feed:
/// `1 + 2·Σ depths + 1`.
pub fn layer_count(config: &StreamConfig) -> usize {
    1 + 2 * config.stage_depths.iter().sum::<usize>() + 1
}

/// Trainable parameter count of [`StreamWeights`] for `config`, computed
/// in closed form rather than from built tensors.
pub fn stream_parameter_count(config: &StreamConfig) -> Result<usize> {
    let widths = config.stage_widths()?;
    let bn = |c: usize| 2 * c;
    let mut total = config.in_channels * widths[0] * 49 + bn(widths[0]);
    let mut channels = widths[0];
    for (stage, &depth) in config.stage_depths.iter().enumerate() {
        for block in 0..depth {
            let out = widths[stage];
            let stride = if block == 0 && stage > 0 { 2 } else { 1 };
            total += channels * out * 9 + bn(out) + out * out * 9 + bn(out);
            if stride != 1 || channels != out {
                total += channels * out + bn(out);
            }
            channels = out;
        }
    }
    Ok(total)
}

/// Batch-norm running-statistic element count (mean and variance per
/// channel of every batch norm).
pub fn stream_buffer_count(config: &StreamConfig) -> Result<usize> {
    let widths = config.stage_widths()?;
    let mut total = 2 * widths[0];
    let mut channels = widths[0];
    for (stage, &depth) in config.stage_depths.iter().enumerate() {
        for block in 0..depth {
            let out = widths[stage];
            let stride = if block == 0 && stage > 0 { 2 } else { 1 };
            total += 4 * out;
            if stride != 1 || channels != out {
                total += 2 * out;
            }
            channels = out;
        }
    }
    Ok(total)
}

/// `relu(F(x) + shortcut(x))` with `F` two 3×3 conv/BN pairs.
#[derive(Clone, Debug)]
pub struct ResidualBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm2d<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm2d<T>,
    pub projection: Option<(Conv2d<T>, BatchNorm2d<T>)>,
}

impl<T: Element> ResidualBlock<T> {
    fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, rng);
        let bn1 = BatchNorm2d::new(&format!("{name}.bn1"), out_ch);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, rng);
        let bn2 = BatchNorm2d::new(&format!("{name}.bn2"), out_ch);
        let projection = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(&format!("{name}.proj"), in_ch, out_ch, 1, stride, 0, rng),
                BatchNorm2d::new(&format!("{name}.proj_bn"), out_ch),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            projection,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let h = self.conv1.forward(tape, x)?;
        let h = self.bn1.forward(tape, h, mode)?;
        let h = tape.relu(h)?;
        let h = self.conv2.forward(tape, h)?;
        let h = self.bn2.forward(tape, h, mode)?;
        let shortcut = match &self.projection {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, s, mode)?
            }
            None => x,
        };
        let sum = tape.add(h, shortcut)?;
        tape.relu(sum)
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm2d<T>> {
        let mut v = vec![&mut self.bn1, &mut self.bn2];
        if let Some((_, bn)) = &mut self.projection {
            v.push(bn);
        }
        v
    }
}

impl<T: Element> Parameterized<T> for ResidualBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((c, b)) = &self.projection {
            c.visit_params(f);
            b.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.bn2.visit_params_mut(f);
        if let Some((c, b)) = &mut self.projection {
            c.visit_params_mut(f);
            b.visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
        if let Some((_, b)) = &self.projection {
            b.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.bn1.visit_buffers_mut(f);
        self.bn2.visit_buffers_mut(f);
        if let Some((_, b)) = &mut self.projection {
            b.visit_buffers_mut(f);
        }
    }
}

/// Parameters and running statistics of one stream.
#[derive(Clone, Debug)]
pub struct StreamWeights<T> {
    config: StreamConfig,
    feature_dim: usize,
    pub stem_conv: Conv2d<T>,
    pub stem_bn: BatchNorm2d<T>,
    pub stages: Vec<Vec<ResidualBlock<T>>>,
}

/// Builds a stream whose parameters are named under `"stream"`.
pub fn build_stream<T: Element>(config: &StreamConfig, seed: u64) -> Result<StreamWeights<T>> {
    StreamWeights::build(config, seed, "stream")
}

impl<T: Element> StreamWeights<T> {
    /// Seeded construction; every parameter name starts with `prefix`.
    pub fn build(config: &StreamConfig, seed: u64, prefix: &str) -> Result<Self> {
        let widths = config.stage_widths()?;
        let feature_dim = config.feature_dim()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem_conv = Conv2d::new(
            &format!("{prefix}.stem.conv"),
            config.in_channels,
            widths[0],
            7,
            2,
            3,
            &mut rng,
        );
        let stem_bn = BatchNorm2d::new(&format!("{prefix}.stem.bn"), widths[0]);
        let mut channels = widths[0];
        let mut stages = Vec::with_capacity(4);
        for (s, &depth) in config.stage_depths.iter().enumerate() {
            let mut blocks = Vec::with_capacity(depth);
            for b in 0..depth {
                let stride = if b == 0 && s > 0 { 2 } else { 1 };
                let name = format!("{prefix}.stage{}.block{b}", s + 1);
                blocks.push(ResidualBlock::new(&name, channels, widths[s], stride, &mut rng));
                channels = widths[s];
            }
            stages.push(blocks);
        }
        Ok(Self {
            config: config.clone(),
            feature_dim,
            stem_conv,
            stem_bn,
            stages,
        })
    }

    pub fn config(&self) -> &StreamConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// `[N, C, H, W]` images to `[N, feature_dim]` pooled features.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return shape_err(format!(
                "stream expects [N, {}, H, W], got {s:?}",
                self.config.in_channels
            ));
        }
        if s[2] < MIN_INPUT_SIDE || s[3] < MIN_INPUT_SIDE {
            return shape_err(format!("stream input {s:?} is smaller than {MIN_INPUT_SIDE}x{MIN_INPUT_SIDE}"));
        }
        let h = self.stem_conv.forward(tape, x)?;
        let h = self.stem_bn.forward(tape, h, mode)?;
        let h = tape.relu(h)?;
        let mut h = tape.max_pool2d(h, 3, 2, 1)?;
        for block in self.stages.iter().flatten() {
            h = block.forward(tape, h, mode)?;
        }
        tape.global_avg_pool(h)
    }

    /// Folds the batch statistics recorded on `tape` into every batch norm's
    /// running averages.
    pub fn commit_running_stats(&mut self, tape: &Tape<T>) {
        self.stem_bn.commit_running_stats(tape);
        for block in self.stages.iter_mut().flatten() {
            for bn in block.batch_norms_mut() {
                bn.commit_running_stats(tape);
            }
        }
    }

    pub fn set_requires_grad(&mut self, on: bool) {
        self.visit_params_mut(&mut |p| p.set_requires_grad(on));
    }

    /// All parameter values concatenated in visiting order.
    pub fn flat_parameters(&self) -> Vec<T> {
        let mut out = Vec::new();
        self.visit_params(&mut |p| out.extend_from_slice(p.value.data()));
        out
    }
}

impl<T: Element> Parameterized<T> for StreamWeights<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem_conv.visit_params(f);
        self.stem_bn.visit_params(f);
        for block in self.stages.iter().flatten() {
            block.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem_conv.visit_params_mut(f);
        self.stem_bn.visit_params_mut(f);
        for block in self.stages.iter_mut().flatten() {
            block.visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.stem_bn.visit_buffers(f);
        for block in self.stages.iter().flatten() {
            block.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.stem_bn.visit_buffers_mut(f);
        for block in self.stages.iter_mut().flatten() {
            block.visit_buffers_mut(f);
        }
    }
}
