use std::collections::HashMap;

use super::kernels::{self, ConvGeom};
use super::{Element, Tensor};
use crate::error::{shape_err, Error, Result};
use crate::nn::{Param, Parameterized};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with the batch's own per-channel statistics.
    Train { eps: f64 },
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a Tensor<T>,
        running_var: &'a Tensor<T>,
        eps: f64,
    },
}

/// Per-channel statistics observed by a train-mode batch norm. `var` is the
/// unbiased estimate used for running-average updates.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Deliberate backward-rule corruption, used by the verification command to
/// prove its gradient suite detects broken rules.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// ReLU backward passes the upstream gradient through unmasked.
    ReluPassThrough,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        out_channels: usize,
        cols: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    Relu {
        x: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool {
        x: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Records operations in execution order so that [`Tape::backward`] can
/// visit each exactly once in reverse.
///
/// A tape lives for one forward/backward pass. Parameters enter through
/// [`Tape::param`], which remembers their names so the resulting
/// [`Gradients`] can be accumulated back into the owning model.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_leaves: Vec<(String, Var)>,
    stats: Vec<(String, BatchStats<T>)>,
    grad_enabled: bool,
    check_finite: bool,
    kinks: Option<u64>,
    fault: Option<Fault>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(FNV_PRIME)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            stats: Vec::new(),
            grad_enabled: true,
            check_finite: false,
            kinks: None,
            fault: None,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    /// Fail with [`Error::Numeric`] as soon as any op produces NaN/Inf.
    pub fn with_finite_checks(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    /// Hash every ReLU sign pattern and pooling argmax into
    /// [`Tape::kink_signature`], so callers can tell whether two evaluations
    /// took the same piecewise-linear branch.
    pub fn with_kink_tracking(mut self) -> Self {
        self.kinks = Some(FNV_OFFSET);
        self
    }

    #[doc(hidden)]
    pub fn with_fault(mut self, fault: Option<Fault>) -> Self {
        self.fault = fault;
        self
    }

    pub fn kink_signature(&self) -> Option<u64> {
        self.kinks
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Statistics recorded by train-mode batch norms, keyed by layer name.
    pub fn batch_stats(&self, name: &str) -> Option<&BatchStats<T>> {
        self.stats.iter().find(|(n, _)| n == name).map(|(_, s)| s)
    }

    pub fn record_batch_stats(&mut self, name: &str, stats: BatchStats<T>) {
        self.stats.push((name.to_owned(), stats));
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push_raw(value, Op::Leaf, rg)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records a parameter as a leaf. It requires a gradient iff the
    /// parameter does and the tape is not in inference mode.
    pub fn param(&mut self, p: &Param<T>) -> Var {
        let v = self.leaf(p.value.clone(), p.requires_grad());
        if self.nodes[v.0].requires_grad {
            self.param_leaves.push((p.name().to_owned(), v));
        }
        v
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::Numeric(name.to_owned()));
        }
        Ok(self.push_raw(value, op, requires_grad))
    }

    fn any_rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn mix_kink(&mut self, v: u64) {
        if let Some(h) = self.kinks.as_mut() {
            *h = fnv(*h, v);
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return shape_err(format!("conv2d expects 4-D input and weight, got {xs:?} and {ws:?}"));
        }
        if xs[1] != ws[1] {
            return shape_err(format!("conv2d channels: input {xs:?} weight {ws:?}"));
        }
        if stride == 0 {
            return shape_err("conv2d stride must be positive");
        }
        let (kh, kw) = (ws[2], ws[3]);
        if kh > xs[2] + 2 * padding || kw > xs[3] + 2 * padding {
            return shape_err(format!("kernel {kh}x{kw} exceeds padded input {xs:?} (padding {padding})"));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [ws[0]] {
                return shape_err(format!("conv2d bias {:?} for {} outputs", self.value(b).shape(), ws[0]));
            }
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: (xs[2] + 2 * padding - kh) / stride + 1,
            out_w: (xs[3] + 2 * padding - kw) / stride + 1,
        };
        let co = ws[0];
        let cols = kernels::im2col(self.value(x).data(), &geom);
        let mut out_cm = vec![T::zero(); co * geom.col_cols()];
        kernels::matmul(
            co,
            geom.col_rows(),
            geom.col_cols(),
            self.value(w).data(),
            false,
            &cols,
            false,
            &mut out_cm,
            false,
        );
        let l = geom.spatial_out();
        let mut out = kernels::channel_to_batch_major(&out_cm, geom.batch, co, l);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for (i, chunk) in out.chunks_mut(l).enumerate() {
                let bv = bias[i % co];
                chunk.iter_mut().for_each(|v| *v = *v + bv);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.any_rg(&inputs);
        let keep_cols = rg && self.nodes[w.0].requires_grad;
        let value = Tensor::from_vec([geom.batch, co, geom.out_h, geom.out_w], out)?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels: co,
                cols: if keep_cols { cols } else { Vec::new() },
            },
            rg,
        )
    }

    /// Per-channel batch normalization over N, H, W. In train mode the
    /// observed statistics are returned so the owning layer can fold them
    /// into its running averages.
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return shape_err(format!("batch_norm2d expects 4-D input, got {xs:?}"));
        }
        let (n, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
        if self.value(gamma).shape() != [c] || self.value(beta).shape() != [c] {
            return shape_err(format!("batch_norm2d affine params must have shape [{c}]"));
        }
        let count = n * plane;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); c];
        let mut stats = None;
        let cnt = T::from_usize(count).expect("count fits");
        match mode {
            BnMode::Train { eps } => {
                let eps = T::from_f64_lossy(eps);
                let mut means = vec![T::zero(); c];
                let mut vars = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for b in 0..n {
                        s = s + xd[(b * c + ch) * plane..][..plane].iter().copied().sum::<T>();
                    }
                    let mean = s / cnt;
                    let mut sq = T::zero();
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * plane..][..plane] {
                            sq = sq + (v - mean) * (v - mean);
                        }
                    }
                    let var = sq / cnt;
                    means[ch] = mean;
                    vars[ch] = if count > 1 {
                        sq / T::from_usize(count - 1).expect("count fits")
                    } else {
                        var
                    };
                    inv_std[ch] = T::one() / (var + eps).sqrt();
                }
                stats = Some(BatchStats { mean: means.clone(), var: vars });
                normalize(xd, &means, &inv_std, g, bt, n, c, plane, &mut xhat, &mut out);
            }
            BnMode::Eval {
                running_mean,
                running_var,
                eps,
            } => {
                if running_mean.shape() != [c] || running_var.shape() != [c] {
                    return shape_err(format!("running statistics must have shape [{c}]"));
                }
                let eps = T::from_f64_lossy(eps);
                for ch in 0..c {
                    inv_std[ch] = T::one() / (running_var.data()[ch] + eps).sqrt();
                }
                normalize(xd, running_mean.data(), &inv_std, g, bt, n, c, plane, &mut xhat, &mut out);
            }
        }
        let rg = self.any_rg(&[x, gamma, beta]);
        let value = Tensor::from_vec(xs, out)?;
        let var = self.push(
            "batch_norm2d",
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: if rg { xhat } else { Vec::new() },
                inv_std,
                batch_stats: matches!(mode, BnMode::Train { .. }),
            },
            rg,
        )?;
        Ok((var, stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        if self.kinks.is_some() {
            let mut h = 0u64;
            for (i, v) in self.value(x).data().iter().enumerate() {
                if *v > T::zero() {
                    h = fnv(h, i as u64);
                }
            }
            self.mix_kink(h);
        }
        let rg = self.any_rg(&[x]);
        self.push("relu", value, Op::Relu { x }, rg)
    }

    /// Windowed maximum. Padding cells never win; ties go to the first
    /// element in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return shape_err(format!("max_pool2d expects 4-D input, got {xs:?}"));
        }
        if k == 0 || stride == 0 {
            return shape_err("max_pool2d window and stride must be positive");
        }
        if k > xs[2] + 2 * padding || k > xs[3] + 2 * padding {
            return shape_err(format!("pool window {k} exceeds input {xs:?}"));
        }
        if 2 * padding > k {
            return shape_err(format!("pool padding {padding} must be at most half of window {k}"));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let oh = (h + 2 * padding - k) / stride + 1;
        let ow = (w + 2 * padding - k) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best: Option<(T, usize)> = None;
                    for dy in 0..k {
                        let Some(y) = (i * stride + dy).checked_sub(padding).filter(|&y| y < h) else {
                            continue;
                        };
                        for dx in 0..k {
                            let Some(xx) = (j * stride + dx).checked_sub(padding).filter(|&v| v < w) else {
                                continue;
                            };
                            let idx = base + y * w + xx;
                            let v = xd[idx];
                            if best.is_none_or(|(b, _)| v > b) {
                                best = Some((v, idx));
                            }
                        }
                    }
                    let (v, idx) = best.expect("window overlaps the input");
                    out.push(v);
                    argmax.push(idx);
                }
            }
        }
        if self.kinks.is_some() {
            let h = argmax.iter().fold(FNV_OFFSET, |h, &i| fnv(h, i as u64));
            self.mix_kink(h);
        }
        let rg = self.any_rg(&[x]);
        let value = Tensor::from_vec([n, c, oh, ow], out)?;
        self.push(
            "max_pool2d",
            value,
            Op::MaxPool {
                x,
                argmax: if rg { argmax } else { Vec::new() },
            },
            rg,
        )
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return shape_err(format!("global_avg_pool expects 4-D input, got {xs:?}"));
        }
        let plane = xs[2] * xs[3];
        let denom = T::from_usize(plane).expect("plane fits");
        let out: Vec<T> = self
            .value(x)
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let rg = self.any_rg(&[x]);
        let value = Tensor::from_vec([xs[0], xs[1]], out)?;
        self.push("global_avg_pool", value, Op::GlobalAvgPool { x }, rg)
    }

    /// `x · wᵀ + b` for `x: [N, Din]`, `w: [Dout, Din]`, `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return shape_err(format!("linear: input {xs:?} weight {ws:?}"));
        }
        if self.value(b).shape() != [ws[0]] {
            return shape_err(format!("linear bias {:?} for {} outputs", self.value(b).shape(), ws[0]));
        }
        let (n, din, dout) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * dout];
        kernels::matmul(n, din, dout, self.value(x).data(), false, self.value(w).data(), true, &mut out, false);
        let bias = self.value(b).data();
        for row in out.chunks_mut(dout) {
            for (o, &bv) in row.iter_mut().zip(bias) {
                *o = *o + bv;
            }
        }
        let rg = self.any_rg(&[x, w, b]);
        let value = Tensor::from_vec([n, dout], out)?;
        self.push("linear", value, Op::Linear { x, w, b }, rg)
    }

    /// Feature-axis concatenation of `[N, Di]` parts, in order.
    pub fn concat_features(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return shape_err("concat_features needs at least one part");
        };
        let n = self.value(first).shape()[0];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != 2 || s[0] != n {
                return shape_err(format!("concat part {s:?} does not match batch {n}"));
            }
            widths.push(s[1]);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for row in 0..n {
            for (&p, &wd) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[row * wd..(row + 1) * wd]);
            }
        }
        let rg = self.any_rg(parts);
        let value = Tensor::from_vec([n, total], out)?;
        self.push("concat_features", value, Op::Concat { parts: parts.to_vec() }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return shape_err(format!("add {:?} and {:?}", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::from_vec(va.shape().to_vec(), data)?;
        let rg = self.any_rg(&[a, b]);
        self.push("add", value, Op::Add { a, b }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_rg(&[x]);
        self.push("sum", value, Op::Sum { x }, rg)
    }

    /// Scalar `Σ xᵢ·wᵢ` with constant weights of the same shape as `x`.
    pub fn weighted_sum(&mut self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        if self.value(x).shape() != weights.shape() {
            return shape_err(format!(
                "weighted_sum weights {:?} for input {:?}",
                weights.shape(),
                self.value(x).shape()
            ));
        }
        let total = self.value(x).data().iter().zip(weights.data()).map(|(&a, &w)| a * w).sum();
        let rg = self.any_rg(&[x]);
        self.push(
            "weighted_sum",
            Tensor::scalar(total),
            Op::WeightedSum {
                x,
                weights: weights.data().to_vec(),
            },
            rg,
        )
    }

    /// Batch-mean of `-log softmax(logits)[label]`, using max-subtraction so
    /// large logits do not overflow.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.value(logits).shape().to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return shape_err(format!("logits {s:?} for {} labels", labels.len()));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Label { label: bad, classes: k });
        }
        let z = self.value(logits).data();
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, &label) in labels.iter().enumerate() {
            let row = &z[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let sum_exp: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum_exp.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - max).exp() / sum_exp;
            }
            total = total + (lse - row[label]);
        }
        let loss = total / T::from_usize(n).expect("batch fits");
        let rg = self.any_rg(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`. Every operation on the tape is
    /// visited once, newest first.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward needs a scalar loss, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| match (g, &node.op) {
                (Some(g), Op::Leaf) => Some(Tensor::from_vec(node.value.shape().to_vec(), g).expect("grad shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            param_leaves: self.param_leaves.clone(),
        })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                out_channels,
                cols,
            } => {
                let (co, l, nl, k) = (*out_channels, geom.spatial_out(), geom.col_cols(), geom.col_rows());
                let gm = kernels::batch_to_channel_major(g, geom.batch, co, l);
                if rg(*w) {
                    let mut dw = vec![T::zero(); co * k];
                    kernels::matmul(co, nl, k, &gm, false, cols, true, &mut dw, false);
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b.filter(|&b| rg(b)) {
                    let db = gm.chunks(nl).map(|row| row.iter().copied().sum()).collect();
                    accumulate(grads, b, db);
                }
                if rg(*x) {
                    let mut dcols = vec![T::zero(); k * nl];
                    kernels::matmul(k, co, nl, self.value(*w).data(), true, &gm, false, &mut dcols, false);
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    kernels::col2im(&dcols, geom, &mut dx);
                    accumulate(grads, *x, dx);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let s = node.value.shape();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let cnt = T::from_usize(n * plane).expect("count fits");
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * plane;
                        for p in 0..plane {
                            sum_g[ch] = sum_g[ch] + g[off + p];
                            sum_gx[ch] = sum_gx[ch] + g[off + p] * xhat[off + p];
                        }
                    }
                }
                if rg(*gamma) {
                    accumulate(grads, *gamma, sum_gx.clone());
                }
                if rg(*beta) {
                    accumulate(grads, *beta, sum_g.clone());
                }
                if rg(*x) {
                    let gm = self.value(*gamma).data();
                    let mut dx = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * plane;
                            let scale = gm[ch] * inv_std[ch];
                            for p in 0..plane {
                                dx[off + p] = if *batch_stats {
                                    scale / cnt * (cnt * g[off + p] - sum_g[ch] - xhat[off + p] * sum_gx[ch])
                                } else {
                                    scale * g[off + p]
                                };
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Relu { x } => {
                if rg(*x) {
                    let xv = self.value(*x).data();
                    let dx = if self.fault == Some(Fault::ReluPassThrough) {
                        g.to_vec()
                    } else {
                        g.iter()
                            .zip(xv)
                            .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                            .collect()
                    };
                    accumulate(grads, *x, dx);
                }
            }
            Op::MaxPool { x, argmax } => {
                if rg(*x) {
                    let mut dx = vec![T::zero(); self.value(*x).numel()];
                    for (&idx, &gi) in argmax.iter().zip(g) {
                        dx[idx] = dx[idx] + gi;
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GlobalAvgPool { x } => {
                if rg(*x) {
                    let xs = self.value(*x).shape();
                    let plane = xs[2] * xs[3];
                    let denom = T::from_usize(plane).expect("plane fits");
                    let mut dx = Vec::with_capacity(self.value(*x).numel());
                    for &gi in g {
                        dx.extend(std::iter::repeat_n(gi / denom, plane));
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.value(*x).shape();
                let (n, din) = (xs[0], xs[1]);
                let dout = self.value(*w).shape()[0];
                if rg(*x) {
                    let mut dx = vec![T::zero(); n * din];
                    kernels::matmul(n, dout, din, g, false, self.value(*w).data(), false, &mut dx, false);
                    accumulate(grads, *x, dx);
                }
                if rg(*w) {
                    let mut dw = vec![T::zero(); dout * din];
                    kernels::matmul(dout, n, din, g, true, self.value(*x).data(), false, &mut dw, false);
                    accumulate(grads, *w, dw);
                }
                if rg(*b) {
                    let mut db = vec![T::zero(); dout];
                    for row in g.chunks(dout) {
                        for (d, &gi) in db.iter_mut().zip(row) {
                            *d = *d + gi;
                        }
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::Concat { parts } => {
                let n = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let wd = self.value(p).shape()[1];
                    if rg(p) {
                        let mut dp = Vec::with_capacity(n * wd);
                        for row in 0..n {
                            dp.extend_from_slice(&g[row * total + offset..][..wd]);
                        }
                        accumulate(grads, p, dp);
                    }
                    offset += wd;
                }
            }
            Op::Add { a, b } => {
                if rg(*a) {
                    accumulate(grads, *a, g.to_vec());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sum { x } => {
                if rg(*x) {
                    accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::WeightedSum { x, weights } => {
                if rg(*x) {
                    accumulate(grads, *x, weights.iter().map(|&w| w * g[0]).collect());
                }
            }
            Op::CrossEntropy { logits, probs, labels } => {
                if rg(*logits) {
                    let k = self.value(*logits).shape()[1];
                    let scale = g[0] / T::from_usize(labels.len()).expect("batch fits");
                    let mut dz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                    for (i, &l) in labels.iter().enumerate() {
                        dz[i * k + l] = dz[i * k + l] - scale;
                    }
                    accumulate(grads, *logits, dz);
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn normalize<T: Element>(
    xd: &[T],
    mean: &[T],
    inv_std: &[T],
    gamma: &[T],
    beta: &[T],
    n: usize,
    c: usize,
    plane: usize,
    xhat: &mut [T],
    out: &mut [T],
) {
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * plane;
            for p in 0..plane {
                let h = (xd[off + p] - mean[ch]) * inv_std[ch];
                xhat[off + p] = h;
                out[off + p] = gamma[ch] * h + beta[ch];
            }
        }
    }
}

fn accumulate<T: Element>(grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.iter_mut().zip(delta) {
                *e = *e + d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Leaf gradients produced by one [`Tape::backward`] call.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    param_leaves: Vec<(String, Var)>,
}

impl<T: Element> Gradients<T> {
    /// Gradient of the loss w.r.t. a leaf, if it required one and was
    /// reachable from the loss.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for a named parameter, summed over every leaf it was
    /// recorded as.
    pub fn param(&self, name: &str) -> Option<Tensor<T>> {
        let mut out: Option<Tensor<T>> = None;
        for (_, v) in self.param_leaves.iter().filter(|(n, _)| n == name) {
            let Some(g) = &self.grads[v.0] else { continue };
            match &mut out {
                Some(acc) => acc.add_assign(g).expect("same parameter, same shape"),
                None => out = Some(g.clone()),
            }
        }
        out
    }

    /// Adds these gradients into every matching trainable parameter of
    /// `target`. Repeated calls accumulate until the parameters' gradients
    /// are zeroed.
    pub fn accumulate_into(&self, target: &mut (impl Parameterized<T> + ?Sized)) {
        let mut by_name: HashMap<&str, Vec<Var>> = HashMap::new();
        for (name, v) in &self.param_leaves {
            by_name.entry(name.as_str()).or_default().push(*v);
        }
        target.visit_params_mut(&mut |p: &mut Param<T>| {
            if !p.requires_grad() {
                return;
            }
            let Some(vars) = by_name.get(p.name()) else { return };
            for v in vars {
                let g = match &self.grads[v.0] {
                    Some(g) => g.clone(),
                    None => Tensor::zeros(p.value.shape().to_vec()),
                };
                p.accumulate_grad(&g);
            }
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_of_ones_sums_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel_returns_input() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..20).map(|i| i as f64 * 0.5 - 3.0).collect();
        let x = tape.constant(t(&[1, 1, 4, 5], &data));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        let y = tape.conv2d(x, w, None, 1, 0).unwrap();
        assert_eq!(tape.value(y).data(), &data[..]);
    }

    #[test]
    fn conv_rejects_oversized_kernel_and_channel_mismatch() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::ones([1, 1, 2, 2]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, w, None, 1, 0), Err(Error::Shape(_))));
        let w2 = tape.constant(Tensor::ones([1, 2, 1, 1]));
        assert!(matches!(tape.conv2d(x, w2, None, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_values_and_subgradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[3], &[-1.0, 0.0, 2.0]), true);
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.0, 0.0, 1.0]);

        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t(&[2], &[-1.0, 3.0]), true);
        let y = tape.relu(x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_of_positive_is_identity() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[0.5, 1.0, 7.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn max_pool_basic_and_constant() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.max_pool2d(x, 2, 2, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);

        let c = tape.constant(Tensor::full([1, 2, 5, 5], 1.5));
        let y = tape.max_pool2d(c, 3, 2, 0).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 1.5));
        assert!(matches!(tape.max_pool2d(x, 3, 1, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn max_pool_tie_routes_gradient_to_first() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([1, 1, 2, 2], 1.0), true);
        let y = tape.max_pool2d(x, 2, 2, 0).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_means() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.global_avg_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5]);
        let c = tape.constant(Tensor::full([2, 3, 3, 3], -4.0));
        let y = tape.global_avg_pool(c).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == -4.0));
    }

    #[test]
    fn linear_identity_and_bias_only() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let eye = tape.constant(t(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let zb = tape.constant(Tensor::zeros([3]));
        let y = tape.linear(x, eye, zb).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let zw = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(t(&[2], &[0.5, -1.5]));
        let y = tape.linear(x, zw, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);

        let bad = tape.constant(Tensor::zeros([2, 4]));
        assert!(matches!(tape.linear(x, bad, b), Err(Error::Shape(_))));
    }

    #[test]
    fn concat_orders_and_splits_gradient() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t(&[1, 2], &[1.0, 2.0]), true);
        let b = tape.leaf(t(&[1, 1], &[3.0]), true);
        let c = tape.concat_features(&[a, b]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let w = tape.constant(t(&[1, 3], &[10.0, 20.0, 30.0]));
        let zb = tape.constant(Tensor::zeros([1]));
        let y = tape.linear(c, w, zb).unwrap();
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(a).unwrap().data(), &[10.0, 20.0]);
        assert_eq!(g.wrt(b).unwrap().data(), &[30.0]);

        let single = tape.concat_features(&[a]).unwrap();
        assert_eq!(tape.value(single), tape.value(a));
        let wide = tape.constant(Tensor::zeros([1, 512]));
        let c3 = tape.concat_features(&[wide, wide, wide]).unwrap();
        assert_eq!(tape.value(c3).shape(), &[1, 1536]);
        let other = tape.constant(Tensor::zeros([2, 1]));
        assert!(matches!(tape.concat_features(&[a, other]), Err(Error::Shape(_))));
    }

    #[test]
    fn cross_entropy_values() {
        let mut tape = Tape::<f64>::new();
        let z = tape.constant(t(&[1, 2], &[0.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((tape.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-12);
        let z = tape.constant(t(&[1, 2], &[1000.0, 0.0]));
        let l = tape.softmax_cross_entropy(z, &[0]).unwrap();
        let v = tape.value(l).data()[0];
        assert!(v.is_finite() && v.abs() < 1e-12);
        assert!(matches!(
            tape.softmax_cross_entropy(z, &[2]),
            Err(Error::Label { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn backward_of_sum_is_ones_and_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::full([2, 2], 3.0), true);
        let s = tape.sum(x).unwrap();
        assert_eq!(tape.backward(s).unwrap().wrt(x).unwrap().data(), &[1.0; 4]);
        assert!(matches!(tape.backward(x), Err(Error::Shape(_))));
    }

    #[test]
    fn batch_norm_annihilated_scale_gives_beta() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 2 * 2).map(|i| (i as f64).sin() * 3.0).collect();
        let x = tape.constant(t(&[2, 3, 2, 2], &data));
        let g = tape.constant(Tensor::zeros([3]));
        let b = tape.constant(Tensor::full([3], 0.75));
        let (y, stats) = tape.batch_norm2d(x, g, b, BnMode::Train { eps: 1e-5 }).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.75));
        assert!(stats.is_some());
    }

    #[test]
    fn finite_checks_flag_non_finite_outputs() {
        let mut tape = Tape::<f64>::new().with_finite_checks(true);
        let x = tape.constant(t(&[1, 1, 1, 1], &[f64::NAN]));
        let w = tape.constant(t(&[1, 1, 1, 1], &[1.0]));
        assert!(matches!(tape.conv2d(x, w, None, 1, 0), Err(Error::Numeric(_))));
        let mut lax = Tape::<f64>::new();
        let x = lax.constant(t(&[1, 1, 1, 1], &[f64::NAN]));
        let w = lax.constant(t(&[1, 1, 1, 1], &[1.0]));
        assert!(lax.conv2d(x, w, None, 1, 0).is_ok());
    }
}
