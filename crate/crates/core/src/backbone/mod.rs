//! A small temporal-shift video classifier with a growable linear head.
//!
//! Every frame goes through a stack of 3x3 convolution blocks (ReLU, then 2x2
//! average pooling on all but the last block). A temporal shift is applied to
//! the input of one block so that features mix across neighbouring frames.
//! Global average pooling over time and space yields the embedding fed to the
//! classification head. Gradients are computed by hand.

mod checkpoint;
mod layers;
mod shift;

use std::sync::Arc;

use ndarray::{Array2, Array5, ArrayView4};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::FrameSequence;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry};
pub use shift::{shift_fold, temporal_shift};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Output channels of each convolution block; the last one is the embedding size.
    pub widths: Vec<usize>,
    pub shift_fraction: f64,
    /// Index of the block whose input is temporally shifted.
    pub shift_before_block: usize,
    /// Standard deviation of freshly added head rows.
    pub head_init_scale: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            channels: 3,
            height: 16,
            width: 16,
            widths: vec![8, 16, 64],
            shift_fraction: 0.25,
            shift_before_block: 1,
            head_init_scale: 1e-2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let blocks = self.widths.len();
        if !(2..=4).contains(&blocks) || self.widths.contains(&0) {
            return Err(Error::Config(format!(
                "widths must list 2 to 4 positive block widths, got {:?}",
                self.widths
            )));
        }
        if self.frames == 0 || self.channels == 0 {
            return Err(Error::Config("frames and channels must be >= 1".into()));
        }
        let div = 1usize << (blocks - 1);
        if self.height == 0 || self.width == 0 || !self.height.is_multiple_of(div) || !self.width.is_multiple_of(div) {
            return Err(Error::Config(format!(
                "frame size {}x{} must be a positive multiple of {div}",
                self.height, self.width
            )));
        }
        if self.shift_before_block == 0 || self.shift_before_block >= blocks {
            return Err(Error::Config(format!(
                "shift_before_block must be in 1..{blocks}, got {}",
                self.shift_before_block
            )));
        }
        shift_fold(self.widths[self.shift_before_block - 1], self.shift_fraction)?;
        if !(self.head_init_scale >= 0.0 && self.head_init_scale.is_finite()) {
            return Err(Error::Config("head_init_scale must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    fn input_len(&self) -> usize {
        self.frames * self.channels * self.height * self.width
    }

    /// Spatial size at the input of block `i`.
    fn block_hw(&self, i: usize) -> (usize, usize) {
        (self.height >> i, self.width >> i)
    }

    fn block_cin(&self, i: usize) -> usize {
        if i == 0 { self.channels } else { self.widths[i - 1] }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Conv {
    cin: usize,
    cout: usize,
    weight: Vec<f64>,
    bias: Vec<f64>,
}

/// All trainable parameters. The head has one row per seen class.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    convs: Vec<Conv>,
    feature_dim: usize,
    head_weight: Vec<f64>,
    head_bias: Vec<f64>,
}

impl Params {
    fn init(config: &BackboneConfig, rng: &mut impl Rng) -> Self {
        let convs = (0..config.widths.len())
            .map(|i| {
                let cin = config.block_cin(i);
                let cout = config.widths[i];
                let std = (2.0 / (cin * 9) as f64).sqrt();
                let weight = (0..cout * cin * 9)
                    .map(|_| std * { let z: f64 = StandardNormal.sample(rng); z })
                    .collect::<Vec<f64>>();
                Conv { cin, cout, weight, bias: vec![0.0; cout] }
            })
            .collect();
        Params {
            convs,
            feature_dim: config.feature_dim(),
            head_weight: Vec::new(),
            head_bias: Vec::new(),
        }
    }

    /// All-zero parameters for `config` with a head of `num_classes` rows.
    pub(crate) fn zeros(config: &BackboneConfig, num_classes: usize) -> Self {
        let convs = (0..config.widths.len())
            .map(|i| {
                let cin = config.block_cin(i);
                let cout = config.widths[i];
                Conv { cin, cout, weight: vec![0.0; cout * cin * 9], bias: vec![0.0; cout] }
            })
            .collect();
        Params {
            convs,
            feature_dim: config.feature_dim(),
            head_weight: vec![0.0; num_classes * config.feature_dim()],
            head_bias: vec![0.0; num_classes],
        }
    }

    fn zeros_like(&self) -> Self {
        Params {
            convs: self
                .convs
                .iter()
                .map(|c| Conv {
                    cin: c.cin,
                    cout: c.cout,
                    weight: vec![0.0; c.weight.len()],
                    bias: vec![0.0; c.bias.len()],
                })
                .collect(),
            feature_dim: self.feature_dim,
            head_weight: vec![0.0; self.head_weight.len()],
            head_bias: vec![0.0; self.head_bias.len()],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head_bias.len()
    }

    /// Named tensors in storage order with their shapes.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            out.push((format!("block{i}.weight"), vec![c.cout, c.cin, 3, 3], &c.weight[..]));
            out.push((format!("block{i}.bias"), vec![c.cout], &c.bias[..]));
        }
        out.push((
            "head.weight".into(),
            vec![self.num_classes(), self.feature_dim],
            &self.head_weight[..],
        ));
        out.push(("head.bias".into(), vec![self.num_classes()], &self.head_bias[..]));
        out
    }

    fn buffers_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.weight);
            out.push(&mut c.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    fn buffers(&self) -> impl Iterator<Item = &[f64]> {
        self.convs
            .iter()
            .flat_map(|c| [&c.weight[..], &c.bias[..]])
            .chain([&self.head_weight[..], &self.head_bias[..]])
    }

    pub fn len(&self) -> usize {
        self.buffers().map(<[f64]>::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The flat parameter vector Θ.
    pub fn flatten(&self) -> Vec<f64> {
        self.buffers().flat_map(|b| b.iter().copied()).collect()
    }

    /// Overwrites all parameters from a flat vector produced by [`Params::flatten`].
    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.len() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} values, expected {}",
                flat.len(),
                self.len()
            )));
        }
        let mut offset = 0;
        for buf in self.buffers_mut() {
            let n = buf.len();
            buf.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        let mut index = index;
        for b in self.buffers() {
            if index < b.len() {
                return Some(b[index]);
            }
            index -= b.len();
        }
        None
    }

    pub fn set(&mut self, index: usize, value: f64) -> bool {
        let mut index = index;
        for b in self.buffers_mut() {
            if index < b.len() {
                b[index] = value;
                return true;
            }
            index -= b.len();
        }
        false
    }

    fn add_scaled(&mut self, other: &Params, scale: f64) {
        for (dst, src) in self.buffers_mut().into_iter().zip(other.buffers()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    /// Euclidean norm over every parameter.
    pub fn norm(&self) -> f64 {
        self.buffers().flat_map(|b| b.iter()).map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, factor: f64) {
        for b in self.buffers_mut() {
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// SHA-256 of the little-endian parameter bytes plus the head width.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update((self.num_classes() as u64).to_le_bytes());
        for b in self.buffers() {
            for v in b {
                hasher.update(v.to_le_bytes());
            }
        }
        hex::encode(hasher.finalize())
    }
}

/// Logits and pooled embeddings for a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchLogits {
    pub logits: Array2<f64>,
    pub features: Array2<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distillation {
    pub lambda: f64,
    pub temperature: f64,
}

impl Default for Distillation {
    fn default() -> Self {
        Self { lambda: 1.0, temperature: 2.0 }
    }
}

/// Batch-mean loss plus the number of top-1 hits on the current head.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    pub correct: usize,
    pub count: usize,
}

struct Trace {
    /// Input to each block's convolution (after the shift where it applies).
    inputs: Vec<Vec<f64>>,
    /// Convolution outputs before ReLU.
    pre: Vec<Vec<f64>>,
}

struct SampleOutput {
    feature: Vec<f64>,
    logits: Vec<f64>,
    trace: Option<Trace>,
}

/// Model parameters Θ, configuration and the frozen previous-task snapshot.
#[derive(Debug, Clone)]
pub struct ModelState {
    config: BackboneConfig,
    params: Params,
    prev_snapshot: Option<Arc<Params>>,
}

impl ModelState {
    /// Fresh model with He-initialised convolutions and an empty head.
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let params = Params::init(&config, rng);
        Ok(Self { config, params, prev_snapshot: None })
    }

    pub(crate) fn from_params(config: BackboneConfig, params: Params) -> Result<Self> {
        config.validate()?;
        let shapes_match = params.convs.len() == config.widths.len()
            && params.convs.iter().enumerate().all(|(i, c)| {
                c.cin == config.block_cin(i)
                    && c.cout == config.widths[i]
                    && c.weight.len() == c.cout * c.cin * 9
                    && c.bias.len() == c.cout
            })
            && params.feature_dim == config.feature_dim()
            && params.head_weight.len() == params.head_bias.len() * params.feature_dim;
        if !shapes_match {
            return Err(Error::Shape("parameters do not match the backbone configuration".into()));
        }
        Ok(Self { config, params, prev_snapshot: None })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn num_classes(&self) -> usize {
        self.params.num_classes()
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }

    pub fn prev_snapshot(&self) -> Option<&Params> {
        self.prev_snapshot.as_deref()
    }

    /// Freezes a copy of the current parameters as the distillation teacher.
    pub fn take_snapshot(&mut self) {
        self.prev_snapshot = Some(Arc::new(self.params.clone()));
    }

    pub fn clear_snapshot(&mut self) {
        self.prev_snapshot = None;
    }

    /// Adds `new_classes` head rows; existing rows are left untouched.
    pub fn expand_head(&mut self, new_classes: usize, rng: &mut impl Rng) -> Result<()> {
        if new_classes == 0 {
            return Err(Error::Config("expand_head needs at least one new class".into()));
        }
        let scale = self.config.head_init_scale;
        let d = self.feature_dim();
        self.params
            .head_weight
            .extend((0..new_classes * d).map(|_| scale * { let z: f64 = StandardNormal.sample(rng); z }));
        self.params.head_bias.extend(std::iter::repeat_n(0.0, new_classes));
        Ok(())
    }

    fn check_frames(&self, frames: ArrayView4<'_, f32>) -> Result<()> {
        let c = &self.config;
        let want = [c.frames, c.channels, c.height, c.width];
        if frames.shape() != want {
            return Err(Error::Shape(format!(
                "input frames {:?} do not match model input {:?}",
                frames.shape(),
                want
            )));
        }
        Ok(())
    }

    /// Forward pass over a `(batch, T, C, H, W)` array.
    pub fn forward(&self, x: &Array5<f64>) -> Result<BatchLogits> {
        let c = &self.config;
        let want = [c.frames, c.channels, c.height, c.width];
        if x.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "input {:?} does not match (batch, {:?})",
                x.shape(),
                want
            )));
        }
        let x = x.as_standard_layout();
        let data = x.as_slice().expect("standard layout");
        let outputs: Vec<SampleOutput> = data
            .chunks_exact(c.input_len())
            .map(|s| forward_sample(c, &self.params, s, false))
            .collect();
        Ok(collect_outputs(&outputs, self.num_classes(), self.feature_dim()))
    }

    pub fn forward_sequences(&self, batch: &[FrameSequence]) -> Result<BatchLogits> {
        let mut outputs = Vec::with_capacity(batch.len());
        for seq in batch {
            self.check_frames(seq.frames().view())?;
            outputs.push(forward_sample(&self.config, &self.params, &to_f64(seq), false));
        }
        Ok(collect_outputs(&outputs, self.num_classes(), self.feature_dim()))
    }

    /// Pooled embedding of one sequence.
    pub fn embed(&self, seq: &FrameSequence) -> Result<Vec<f64>> {
        self.check_frames(seq.frames().view())?;
        Ok(forward_sample(&self.config, &self.params, &to_f64(seq), false).feature)
    }

    fn validate_batch(&self, batch: &[FrameSequence], distill: Option<Distillation>) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Shape("empty training batch".into()));
        }
        for seq in batch {
            self.check_frames(seq.frames().view())?;
            if seq.label() >= self.num_classes() {
                return Err(Error::Shape(format!(
                    "target {} outside head of width {}",
                    seq.label(),
                    self.num_classes()
                )));
            }
        }
        if let Some(d) = distill {
            if !(d.lambda >= 0.0 && d.temperature > 0.0) {
                return Err(Error::Config(format!(
                    "distillation needs lambda >= 0 and temperature > 0, got {d:?}"
                )));
            }
            if d.lambda > 0.0 && self.prev_snapshot.is_none() {
                return Err(Error::Config("distillation requested without a snapshot".into()));
            }
        }
        Ok(())
    }

    /// Mean cross-entropy over the current head plus `lambda` times the
    /// temperature-scaled KL divergence from the snapshot's old-class
    /// distribution, with the usual `T^2` factor.
    pub fn training_loss(&self, batch: &[FrameSequence], distill: Option<Distillation>) -> Result<f64> {
        self.validate_batch(batch, distill)?;
        let mut total = 0.0;
        for seq in batch {
            let x = to_f64(seq);
            let out = forward_sample(&self.config, &self.params, &x, false);
            let teacher = self.teacher_logits(&x, distill);
            total += sample_loss(&out.logits, seq.label(), teacher.as_ref()).0;
        }
        Ok(total / batch.len() as f64)
    }

    /// Loss report and the gradient of the batch-mean loss.
    pub fn loss_and_gradient(
        &self,
        batch: &[FrameSequence],
        distill: Option<Distillation>,
    ) -> Result<(LossReport, Params)> {
        self.validate_batch(batch, distill)?;
        let mut grads = self.params.zeros_like();
        let mut total = 0.0;
        let mut correct = 0;
        let inv = 1.0 / batch.len() as f64;
        for seq in batch {
            let x = to_f64(seq);
            let out = forward_sample(&self.config, &self.params, &x, true);
            if argmax(&out.logits) == Some(seq.label()) {
                correct += 1;
            }
            let teacher = self.teacher_logits(&x, distill);
            let (loss, mut dlogits) = sample_loss(&out.logits, seq.label(), teacher.as_ref());
            total += loss;
            dlogits.iter_mut().for_each(|g| *g *= inv);
            backward_sample(&self.config, &self.params, &out, &dlogits, &mut grads);
        }
        Ok((LossReport { loss: total * inv, correct, count: batch.len() }, grads))
    }

    pub fn sgd_step(&mut self, grads: &Params, learning_rate: f64) {
        self.params.add_scaled(grads, -learning_rate);
    }

    /// One forward/backward pass and SGD update.
    pub fn train_step(
        &mut self,
        batch: &[FrameSequence],
        distill: Option<Distillation>,
        learning_rate: f64,
    ) -> Result<LossReport> {
        self.train_step_clipped(batch, distill, learning_rate, None)
    }

    /// Like [`train_step`](Self::train_step), but the gradient is rescaled to
    /// at most `max_grad_norm` before the update.
    pub fn train_step_clipped(
        &mut self,
        batch: &[FrameSequence],
        distill: Option<Distillation>,
        learning_rate: f64,
        max_grad_norm: Option<f64>,
    ) -> Result<LossReport> {
        let (report, mut grads) = self.loss_and_gradient(batch, distill)?;
        if !report.loss.is_finite() {
            return Err(Error::Protocol(format!("non-finite training loss {}", report.loss)));
        }
        if let Some(max) = max_grad_norm {
            let norm = grads.norm();
            if norm > max {
                grads.scale(max / norm);
            }
        }
        self.sgd_step(&grads, learning_rate);
        Ok(report)
    }

    fn teacher_logits(&self, x: &[f64], distill: Option<Distillation>) -> Option<Teacher> {
        let d = distill.filter(|d| d.lambda > 0.0)?;
        let snapshot = self.prev_snapshot.as_ref()?;
        if snapshot.num_classes() == 0 {
            return None;
        }
        let logits = forward_sample(&self.config, snapshot, x, false).logits;
        Some(Teacher { logits, lambda: d.lambda, temperature: d.temperature })
    }
}

struct Teacher {
    logits: Vec<f64>,
    lambda: f64,
    temperature: f64,
}

fn to_f64(seq: &FrameSequence) -> Vec<f64> {
    seq.frames().iter().map(|&v| f64::from(v)).collect()
}

pub(crate) fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in values.iter().enumerate() {
        if best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    best.map(|(i, _)| i)
}

fn collect_outputs(outputs: &[SampleOutput], classes: usize, dim: usize) -> BatchLogits {
    let n = outputs.len();
    let logits = Array2::from_shape_vec(
        (n, classes),
        outputs.iter().flat_map(|o| o.logits.iter().copied()).collect(),
    )
    .expect("logit rows");
    let features = Array2::from_shape_vec(
        (n, dim),
        outputs.iter().flat_map(|o| o.feature.iter().copied()).collect(),
    )
    .expect("feature rows");
    BatchLogits { logits, features }
}

fn log_softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max) / temperature;
    let lse = z.iter().map(|v| (v / temperature - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|v| v / temperature - lse).collect()
}

/// Per-sample loss and its gradient with respect to the logits.
fn sample_loss(logits: &[f64], target: usize, teacher: Option<&Teacher>) -> (f64, Vec<f64>) {
    let log_p = log_softmax(logits, 1.0);
    let mut loss = -log_p[target];
    let mut grad: Vec<f64> = log_p.iter().map(|l| l.exp()).collect();
    grad[target] -= 1.0;
    if let Some(t) = teacher {
        let old = t.logits.len().min(logits.len());
        let tau = t.temperature;
        let log_q = log_softmax(&logits[..old], tau);
        let log_p_old = log_softmax(&t.logits[..old], tau);
        let kl: f64 = log_p_old.iter().zip(&log_q).map(|(lp, lq)| lp.exp() * (lp - lq)).sum();
        loss += t.lambda * tau * tau * kl;
        for i in 0..old {
            grad[i] += t.lambda * tau * (log_q[i].exp() - log_p_old[i].exp());
        }
    }
    (loss, grad)
}

fn forward_sample(config: &BackboneConfig, params: &Params, x: &[f64], keep: bool) -> SampleOutput {
    let frames = config.frames;
    let blocks = params.convs.len();
    let mut trace = keep.then(|| Trace { inputs: Vec::new(), pre: Vec::new() });
    let mut cur = x.to_vec();
    let mut feature = vec![0.0; params.feature_dim];

    for (i, conv) in params.convs.iter().enumerate() {
        let (h, w) = config.block_hw(i);
        let plane = h * w;
        if i == config.shift_before_block {
            let fold = shift_fold(conv.cin, config.shift_fraction).expect("validated");
            let mut shifted = vec![0.0; cur.len()];
            shift::shift_into(&cur, &mut shifted, frames, conv.cin, plane, fold, false);
            cur = shifted;
        }
        let pre = layers::conv3x3_frames_forward(&cur, frames, conv.cin, h, w, &conv.weight, &conv.bias);
        let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
        if let Some(tr) = trace.as_mut() {
            tr.inputs.push(std::mem::take(&mut cur));
            tr.pre.push(pre);
        }
        if i + 1 < blocks {
            let (oh, ow) = (h / 2, w / 2);
            let mut pooled = vec![0.0; frames * conv.cout * oh * ow];
            for t in 0..frames {
                layers::avg_pool2_forward(
                    &act[t * conv.cout * plane..(t + 1) * conv.cout * plane],
                    conv.cout,
                    h,
                    w,
                    &mut pooled[t * conv.cout * oh * ow..(t + 1) * conv.cout * oh * ow],
                );
            }
            cur = pooled;
        } else {
            let norm = 1.0 / (frames * plane) as f64;
            for t in 0..frames {
                for (c, f) in feature.iter_mut().enumerate() {
                    let o = (t * conv.cout + c) * plane;
                    *f += act[o..o + plane].iter().sum::<f64>() * norm;
                }
            }
        }
    }

    let d = params.feature_dim;
    let logits = params
        .head_bias
        .iter()
        .enumerate()
        .map(|(k, b)| {
            b + params.head_weight[k * d..(k + 1) * d]
                .iter()
                .zip(&feature)
                .map(|(w, f)| w * f)
                .sum::<f64>()
        })
        .collect();
    SampleOutput { feature, logits, trace }
}

fn backward_sample(
    config: &BackboneConfig,
    params: &Params,
    out: &SampleOutput,
    dlogits: &[f64],
    grads: &mut Params,
) {
    let trace = out.trace.as_ref().expect("forward trace kept");
    let d = params.feature_dim;
    let frames = config.frames;
    let mut dfeature = vec![0.0; d];
    for (k, &g) in dlogits.iter().enumerate() {
        grads.head_bias[k] += g;
        let row = &params.head_weight[k * d..(k + 1) * d];
        let grow = &mut grads.head_weight[k * d..(k + 1) * d];
        for j in 0..d {
            grow[j] += g * out.feature[j];
            dfeature[j] += g * row[j];
        }
    }

    let blocks = params.convs.len();
    let (h, w) = config.block_hw(blocks - 1);
    let norm = 1.0 / (frames * h * w) as f64;
    // gradient w.r.t. the ReLU output of the current block
    let mut dact = vec![0.0; frames * d * h * w];
    for t in 0..frames {
        for (c, g) in dfeature.iter().enumerate() {
            let o = (t * d + c) * h * w;
            dact[o..o + h * w].fill(g * norm);
        }
    }

    for i in (0..blocks).rev() {
        let conv = &params.convs[i];
        let (h, w) = config.block_hw(i);
        let plane = h * w;
        let pre = &trace.pre[i];
        let dpre: Vec<f64> =
            dact.iter().zip(pre).map(|(g, z)| if *z > 0.0 { *g } else { 0.0 }).collect();
        let need_input = i > 0;
        let mut dinput = if need_input { vec![0.0; frames * conv.cin * plane] } else { Vec::new() };
        let gconv = &mut grads.convs[i];
        layers::conv3x3_frames_backward(
            &trace.inputs[i],
            frames,
            conv.cin,
            h,
            w,
            &conv.weight,
            &dpre,
            &mut gconv.weight,
            &mut gconv.bias,
            need_input.then_some(&mut dinput[..]),
        );
        if !need_input {
            break;
        }
        if i == config.shift_before_block {
            let fold = shift_fold(conv.cin, config.shift_fraction).expect("validated");
            let mut unshifted = vec![0.0; dinput.len()];
            shift::shift_into(&dinput, &mut unshifted, frames, conv.cin, plane, fold, true);
            dinput = unshifted;
        }
        // undo the pooling of block i - 1
        let (ph, pw) = config.block_hw(i - 1);
        let c = conv.cin;
        let mut prev = vec![0.0; frames * c * ph * pw];
        for t in 0..frames {
            layers::avg_pool2_backward(
                &dinput[t * c * plane..(t + 1) * c * plane],
                c,
                ph,
                pw,
                &mut prev[t * c * ph * pw..(t + 1) * c * ph * pw],
            );
        }
        dact = prev;
    }
}
