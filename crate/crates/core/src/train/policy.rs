//! Staged training: each stream is pretrained alone behind a temporary
//! proxy head, then the head is trained over frozen streams, then the whole
//! network is fine-tuned at a reduced learning rate.

use std::fmt;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::augment::{augment_tile, AugmentConfig};
use super::dataset::TileDataset;
use crate::checkpoint::save_checkpoint;
use crate::error::{Error, Result};
use crate::eval::SingleStreamModel;
use crate::model::{Classifier, FreezeState, TriResNet, NUM_STREAMS};
use crate::nn::{Mode, Parameterized};
use crate::tensor::{Element, Tape, Tensor, Var};

pub const FINETUNE_LR_DIVISOR: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_stage3: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Pretrain stream `i` only on items `i, i+3, i+6, ..` instead of on
    /// a stream-specific shuffle of the whole set.
    pub disjoint_stream_subsets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            batch_size: 32,
            epochs_stage1: 5,
            epochs_stage2: 5,
            epochs_stage3: 5,
            adam: AdamConfig::default(),
            seed: 0,
            augment: AugmentConfig::default(),
            disjoint_stream_subsets: false,
        }
    }
}

impl TrainConfig {
    pub fn finetune_lr(&self) -> f64 {
        self.base_lr / FINETUNE_LR_DIVISOR
    }

    pub fn total_epochs(&self) -> usize {
        self.epochs_stage1 + self.epochs_stage2 + self.epochs_stage3
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.augment.brightness >= 0.0 && self.augment.brightness.is_finite()) {
            return Err(Error::Config("brightness range must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StageId {
    PretrainStream(usize),
    Head,
    Finetune,
    /// Conventional training of the single-stream reference network.
    Baseline,
}

impl fmt::Display for StageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StageId::PretrainStream(i) => write!(f, "pretrain_stream_{i}"),
            StageId::Head => f.write_str("head"),
            StageId::Finetune => f.write_str("finetune"),
            StageId::Baseline => f.write_str("baseline"),
        }
    }
}

/// One line of the epoch log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub stage: StageId,
    pub lr: f64,
    pub epochs: Vec<EpochRecord>,
    pub wall_time: Duration,
    /// Top-level parameter groups (`stream0`, `head`, `proxy1`, ..) that
    /// were trainable during the stage.
    pub updated_groups: Vec<String>,
    pub updated_parameters: usize,
}

impl StageReport {
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record") + "\n")
            .collect()
    }
}

pub struct TrainingData<T> {
    pub train: TileDataset<T>,
    pub val: Option<TileDataset<T>>,
}

/// Hooks around every stage of [`run_policy`]. An error aborts the run.
pub trait PolicyObserver<T: Element> {
    fn on_stage_start(&mut self, _stage: StageId, _model: &TriResNet<T>) -> Result<()> {
        Ok(())
    }

    fn on_stage_end(&mut self, _report: &StageReport, _model: &TriResNet<T>) -> Result<()> {
        Ok(())
    }
}

impl<T: Element> PolicyObserver<T> for () {}

/// Writes `<dir>/<stage>.ckpt` after each stage and appends the stage's
/// epoch records to `<dir>/reports.jsonl`.
pub struct CheckpointWriter {
    dir: PathBuf,
}

impl CheckpointWriter {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("reports.jsonl"), "")?;
        Ok(Self { dir: dir.to_owned() })
    }

    pub fn checkpoint_path(&self, stage: StageId) -> PathBuf {
        self.dir.join(format!("{stage}.ckpt"))
    }

    pub fn append_report(&self, report: &StageReport) -> Result<()> {
        let mut f = OpenOptions::new().append(true).open(self.dir.join("reports.jsonl"))?;
        f.write_all(report.to_jsonl().as_bytes())?;
        Ok(())
    }
}

impl<T: Element> PolicyObserver<T> for CheckpointWriter {
    fn on_stage_end(&mut self, report: &StageReport, model: &TriResNet<T>) -> Result<()> {
        save_checkpoint(model, &self.checkpoint_path(report.stage))?;
        self.append_report(report)
    }
}

fn update_mask<T: Element>(model: &impl Parameterized<T>) -> (Vec<String>, usize) {
    let mut groups: Vec<String> = Vec::new();
    let mut count = 0;
    model.visit_params(&mut |p| {
        if p.requires_grad() {
            count += p.value.numel();
            let g = p.name().split('.').next().unwrap_or("").to_owned();
            if !groups.contains(&g) {
                groups.push(g);
            }
        }
    });
    (groups, count)
}

/// Consecutive chunks of `order`; a trailing singleton joins the previous
/// chunk because batch statistics of one sample carry no signal once the
/// spatial extent has collapsed to 1×1.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    let n = out.len();
    if size > 1 && n > 1 && out[n - 1].len() == 1 {
        out.truncate(n - 2);
        out.push(&order[(n - 2) * size..]);
    }
    out
}

/// Rows of `logits` whose first maximal entry is the label.
pub fn count_correct<T: Element>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

fn eval_accuracy<T, M, F>(model: &M, forward: &F, data: &TileDataset<T>, batch_size: usize) -> Result<f64>
where
    T: Element,
    F: Fn(&M, &mut Tape<T>, Var, Mode) -> Result<Var>,
{
    let order: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in order.chunks(batch_size) {
        let (x, labels) = data.batch(chunk, Tensor::clone)?;
        let mut tape = Tape::inference();
        let xv = tape.constant(x);
        let logits = forward(model, &mut tape, xv, Mode::Eval)?;
        correct += count_correct(tape.value(logits), &labels);
    }
    Ok(correct as f64 / data.len() as f64)
}

struct StagePlan<'a> {
    stage: StageId,
    lr: f64,
    epochs: usize,
    seed: u64,
    indices: &'a [usize],
}

fn train_stage<T, M, F>(
    model: &mut M,
    forward: F,
    data: &TrainingData<T>,
    cfg: &TrainConfig,
    plan: StagePlan<'_>,
) -> Result<StageReport>
where
    T: Element,
    M: Classifier<T>,
    F: Fn(&M, &mut Tape<T>, Var, Mode) -> Result<Var>,
{
    let start = Instant::now();
    let (updated_groups, updated_parameters) = update_mask(model);
    let mut report = StageReport {
        stage: plan.stage,
        lr: plan.lr,
        epochs: Vec::new(),
        wall_time: Duration::ZERO,
        updated_groups,
        updated_parameters,
    };
    if plan.epochs == 0 {
        return Ok(report);
    }
    if plan.indices.is_empty() {
        return Err(Error::Config(format!("no training tiles for stage {}", plan.stage)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut adam = AdamState::new(cfg.adam);
    let mut order = plan.indices.to_vec();
    for epoch in 0..plan.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for chunk in batches(&order, cfg.batch_size) {
            let (x, labels) = data
                .train
                .batch(chunk, |t| augment_tile(t, &cfg.augment, &mut rng))?;
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let logits = forward(model, &mut tape, xv, Mode::Train)?;
            correct += count_correct(tape.value(logits), &labels);
            let loss = tape.softmax_cross_entropy(logits, &labels)?;
            loss_sum += tape.value(loss).data()[0].to_f64_lossy() * labels.len() as f64;
            let grads = tape.backward(loss)?;
            grads.accumulate_into(model);
            model.commit_running_stats(&tape);
            adam_step(model, &mut adam, plan.lr)?;
        }
        let val_acc = match &data.val {
            Some(v) if !v.is_empty() => Some(eval_accuracy(model, &forward, v, cfg.batch_size)?),
            _ => None,
        };
        report.epochs.push(EpochRecord {
            stage: plan.stage.to_string(),
            epoch,
            loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            val_acc,
            lr: plan.lr,
        });
    }
    report.wall_time = start.elapsed();
    Ok(report)
}

fn require_no_proxies<T: Element>(m: &TriResNet<T>) -> Result<()> {
    match (0..NUM_STREAMS).find(|&i| m.has_proxy_head(i)) {
        Some(i) => Err(Error::State(format!("stream {i} still has a proxy head"))),
        None => Ok(()),
    }
}

fn stream_indices(n: usize, stream: usize, cfg: &TrainConfig) -> Vec<usize> {
    if cfg.disjoint_stream_subsets {
        (stream..n).step_by(NUM_STREAMS).collect()
    } else {
        (0..n).collect()
    }
}

/// Seed of stream `i`'s proxy head; offset away from the shuffle seeds.
fn proxy_seed(cfg: &TrainConfig, i: usize) -> u64 {
    cfg.seed.wrapping_add(1000 + i as u64)
}

/// Trains each stream in turn, with every other stream and the head
/// frozen, through a freshly attached proxy head that is discarded
/// afterwards. Stream `i` sees a shuffle seeded with `seed + i`.
pub fn pretrain_streams<T: Element>(
    m: &mut TriResNet<T>,
    data: &TrainingData<T>,
    cfg: &TrainConfig,
) -> Result<Vec<StageReport>> {
    pretrain_streams_observed(m, data, cfg, &mut ())
}

pub fn pretrain_streams_observed<T: Element>(
    m: &mut TriResNet<T>,
    data: &TrainingData<T>,
    cfg: &TrainConfig,
    observer: &mut dyn PolicyObserver<T>,
) -> Result<Vec<StageReport>> {
    cfg.validate()?;
    require_no_proxies(m)?;
    let saved = m.freeze_state();
    let mut reports = Vec::with_capacity(NUM_STREAMS);
    for i in 0..NUM_STREAMS {
        let stage = StageId::PretrainStream(i);
        observer.on_stage_start(stage, m)?;
        let mut streams = [true; NUM_STREAMS];
        streams[i] = false;
        m.set_freeze_state(FreezeState { streams, head: true });
        m.attach_proxy_head(i, proxy_seed(cfg, i))?;
        let indices = stream_indices(data.train.len(), i, cfg);
        let plan = StagePlan {
            stage,
            lr: cfg.base_lr,
            epochs: cfg.epochs_stage1,
            seed: cfg.seed.wrapping_add(i as u64),
            indices: &indices,
        };
        let result = train_stage(m, |m, t, x, mode| m.forward_proxy(i, t, x, mode), data, cfg, plan);
        m.detach_proxy_head(i)?;
        m.set_freeze_state(saved);
        let report = result?;
        observer.on_stage_end(&report, m)?;
        reports.push(report);
    }
    Ok(reports)
}

/// Trains only the head over all three frozen streams at the base rate.
/// The freeze state in effect before the call is restored afterwards.
pub fn train_head<T: Element>(m: &mut TriResNet<T>, data: &TrainingData<T>, cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    require_no_proxies(m)?;
    let saved = m.freeze_state();
    m.set_freeze_state(FreezeState {
        streams: [true; NUM_STREAMS],
        head: false,
    });
    let indices: Vec<usize> = (0..data.train.len()).collect();
    let plan = StagePlan {
        stage: StageId::Head,
        lr: cfg.base_lr,
        epochs: cfg.epochs_stage2,
        seed: cfg.seed.wrapping_add(NUM_STREAMS as u64),
        indices: &indices,
    };
    let result = train_stage(m, |m, t, x, mode| m.forward(t, x, mode), data, cfg, plan);
    m.set_freeze_state(saved);
    result
}

/// Unfreezes everything and trains end to end at `base_lr / 10`.
pub fn fine_tune<T: Element>(m: &mut TriResNet<T>, data: &TrainingData<T>, cfg: &TrainConfig) -> Result<StageReport> {
    cfg.validate()?;
    m.set_freeze_state(FreezeState::default());
    let indices: Vec<usize> = (0..data.train.len()).collect();
    let plan = StagePlan {
        stage: StageId::Finetune,
        lr: cfg.finetune_lr(),
        epochs: cfg.epochs_stage3,
        seed: cfg.seed.wrapping_add(NUM_STREAMS as u64 + 1),
        indices: &indices,
    };
    train_stage(m, |m, t, x, mode| m.forward(t, x, mode), data, cfg, plan)
}

/// All three stages in order, yielding five reports:
/// `pretrain_stream_0..2`, `head`, `finetune`.
pub fn run_policy<T: Element>(
    m: &mut TriResNet<T>,
    data: &TrainingData<T>,
    cfg: &TrainConfig,
    observer: &mut dyn PolicyObserver<T>,
) -> Result<Vec<StageReport>> {
    let mut reports = pretrain_streams_observed(m, data, cfg, observer)?;
    observer.on_stage_start(StageId::Head, m)?;
    let head = train_head(m, data, cfg)?;
    observer.on_stage_end(&head, m)?;
    reports.push(head);
    observer.on_stage_start(StageId::Finetune, m)?;
    let ft = fine_tune(m, data, cfg)?;
    observer.on_stage_end(&ft, m)?;
    reports.push(ft);
    Ok(reports)
}

/// Trains the single-stream network for as many epochs as the whole policy
/// spends, at the base rate.
pub fn train_baseline<T: Element>(
    m: &mut SingleStreamModel<T>,
    data: &TrainingData<T>,
    cfg: &TrainConfig,
) -> Result<StageReport> {
    cfg.validate()?;
    let indices: Vec<usize> = (0..data.train.len()).collect();
    let plan = StagePlan {
        stage: StageId::Baseline,
        lr: cfg.base_lr,
        epochs: cfg.total_epochs(),
        seed: cfg.seed,
        indices: &indices,
    };
    train_stage(m, |m, t, x, mode| m.forward(t, x, mode), data, cfg, plan)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trailing_singleton_joins_previous_batch() {
        let order: Vec<usize> = (0..7).collect();
        let b = batches(&order, 3);
        assert_eq!(b, vec![&order[0..3], &order[3..7]]);
        assert_eq!(batches(&order[..6], 3).len(), 2);
        assert_eq!(batches(&order[..1], 3), vec![&order[..1]]);
    }

    #[test]
    fn stage_names() {
        let names: Vec<String> = [
            StageId::PretrainStream(0),
            StageId::PretrainStream(2),
            StageId::Head,
            StageId::Finetune,
        ]
        .iter()
        .map(ToString::to_string)
        .collect();
        assert_eq!(names, ["pretrain_stream_0", "pretrain_stream_2", "head", "finetune"]);
    }

    #[test]
    fn finetune_rate_is_a_tenth() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.finetune_lr(), 1e-4 / 10.0);
    }

    #[test]
    fn argmax_ties_take_first_class() {
        let logits = Tensor::<f64>::from_vec([2, 2], vec![1.0, 1.0, 0.0, 2.0]).unwrap();
        assert_eq!(count_correct(&logits, &[0, 1]), 2);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
