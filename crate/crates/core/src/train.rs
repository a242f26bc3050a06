//! Desk-scale supervised training: loss, optimizers, learning-rate
//! schedule, synthetic data, the training loop and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, INPUT_MULTIPLE};
use crate::nn::{Mode, ParamId, ParamRegistry};
use crate::real::Real;
use crate::tensor::Tensor;

/// Mean softmax cross-entropy over the batch and its gradient
/// `(softmax - onehot) / N`.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
    let &[n, k] = logits.shape() else {
        return Err(Error::dim("cross_entropy", format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if labels.len() != n {
        return Err(Error::dim("cross_entropy", format!("{} labels for batch {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let inv_n = T::one() / T::of_f64(n as f64);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut loss = T::zero();
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - row[label];
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - lse).exp() * inv_n;
        }
        g[label] -= inv_n;
    }
    Ok((loss * inv_n, grad))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// SGD momentum.
    pub momentum: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.05, momentum: 0.9 }
    }
}

/// Per-parameter optimizer slots, aligned one-to-one with the trainable
/// entries of a registry.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    pub kind: OptimizerKind,
    pub hyper: Hyper,
    pub step: u64,
    ids: Vec<ParamId>,
    /// AdamW first moments or SGD velocities.
    first: Vec<Tensor<T>>,
    /// AdamW second moments; empty for SGD.
    second: Vec<Tensor<T>>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(kind: OptimizerKind, hyper: Hyper, reg: &ParamRegistry<T>) -> Self {
        let mut ids = Vec::new();
        let mut first = Vec::new();
        for (k, p) in reg.iter().enumerate() {
            if p.trainable() {
                ids.push(ParamId(k));
                first.push(Tensor::zeros(p.value.shape()));
            }
        }
        let second = if kind == OptimizerKind::AdamW { first.clone() } else { Vec::new() };
        Self { kind, hyper, step: 0, ids, first, second }
    }

    pub fn adamw(reg: &ParamRegistry<T>, lr: f64, weight_decay: f64) -> Self {
        Self::new(OptimizerKind::AdamW, Hyper { lr, weight_decay, ..Hyper::default() }, reg)
    }

    pub fn sgd(reg: &ParamRegistry<T>, lr: f64, momentum: f64) -> Self {
        Self::new(OptimizerKind::Sgd, Hyper { lr, momentum, weight_decay: 0.0, ..Hyper::default() }, reg)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn first_moment(&self, slot: usize) -> &Tensor<T> {
        &self.first[slot]
    }

    /// Confirms the slots still mirror the registry's trainable tensors.
    pub fn check(&self, reg: &ParamRegistry<T>) -> Result<()> {
        let trainable: Vec<(usize, &[usize])> =
            reg.iter().enumerate().filter(|(_, p)| p.trainable()).map(|(k, p)| (k, p.value.shape())).collect();
        if trainable.len() != self.ids.len() {
            return Err(Error::Consistency(format!(
                "{} optimizer slots for {} trainable tensors",
                self.ids.len(),
                trainable.len()
            )));
        }
        for (slot, ((k, shape), id)) in trainable.iter().zip(&self.ids).enumerate() {
            if *k != id.0 || self.first[slot].shape() != *shape {
                return Err(Error::Consistency(format!(
                    "slot {slot} ({}) has shape {:?}, parameter has {:?}",
                    reg.get(*id).name,
                    self.first[slot].shape(),
                    shape
                )));
            }
            if let Some(s) = self.second.get(slot) {
                if s.shape() != *shape {
                    return Err(Error::Consistency(format!("second moment {slot} shape drift")));
                }
            }
        }
        Ok(())
    }

    /// Applies one update with the current hyperparameters, then zeroes the
    /// gradients.
    pub fn apply(&mut self, reg: &mut ParamRegistry<T>) -> Result<()> {
        match self.kind {
            OptimizerKind::AdamW => adamw_step(reg, self),
            OptimizerKind::Sgd => sgd_step(reg, self),
        }
    }
}

/// Bias-corrected Adam update with decoupled weight decay on
/// decay-eligible parameters: `p ← p·(1 − lr·wd)`, then
/// `p ← p − lr · m̂ / (√v̂ + ε)`.
pub fn adamw_step<T: Real>(reg: &mut ParamRegistry<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if state.kind != OptimizerKind::AdamW {
        return Err(Error::Consistency("adamw_step on an SGD state".into()));
    }
    state.check(reg)?;
    state.step += 1;
    let h = state.hyper;
    let t = state.step as i32;
    let c1 = 1.0 - libm::pow(h.beta1, t as f64);
    let c2 = 1.0 - libm::pow(h.beta2, t as f64);
    let (b1, b2) = (T::of_f64(h.beta1), T::of_f64(h.beta2));
    let (ob1, ob2) = (T::of_f64(1.0 - h.beta1), T::of_f64(1.0 - h.beta2));
    let (inv_c1, inv_c2) = (T::of_f64(1.0 / c1), T::of_f64(1.0 / c2));
    let lr = T::of_f64(h.lr);
    let eps = T::of_f64(h.eps);
    for (slot, &id) in state.ids.iter().enumerate() {
        let p = reg.get_mut(id);
        let shrink = if p.decays() { T::of_f64(1.0 - h.lr * h.weight_decay) } else { T::one() };
        let m = state.first[slot].data_mut();
        let v = state.second[slot].data_mut();
        for (((w, &g), mi), vi) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *mi = b1 * *mi + ob1 * g;
            *vi = b2 * *vi + ob2 * g * g;
            let mhat = *mi * inv_c1;
            let vhat = *vi * inv_c2;
            *w = *w * shrink - lr * mhat / (vhat.sqrt() + eps);
        }
    }
    reg.zero_grad();
    Ok(())
}

/// Classical momentum: `v ← μv + g`, `p ← p − lr·v`; decay-eligible
/// parameters get `wd·p` added to their gradient.
pub fn sgd_step<T: Real>(reg: &mut ParamRegistry<T>, state: &mut OptimizerState<T>) -> Result<()> {
    if state.kind != OptimizerKind::Sgd {
        return Err(Error::Consistency("sgd_step on an AdamW state".into()));
    }
    state.check(reg)?;
    state.step += 1;
    let h = state.hyper;
    let (mu, lr, wd) = (T::of_f64(h.momentum), T::of_f64(h.lr), T::of_f64(h.weight_decay));
    for (slot, &id) in state.ids.iter().enumerate() {
        let p = reg.get_mut(id);
        let decay = if p.decays() { wd } else { T::zero() };
        let vel = state.first[slot].data_mut();
        for ((w, &g), v) in p.value.data_mut().iter_mut().zip(p.grad.data()).zip(vel.iter_mut()) {
            *v = mu * *v + g + decay * *w;
            *w -= lr * *v;
        }
    }
    reg.zero_grad();
    Ok(())
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then half-cosine
/// decay to 0 at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, warmup_steps: usize) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    if total_steps <= warmup_steps {
        return base_lr;
    }
    let progress = ((step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64).min(1.0);
    0.5 * base_lr * (1.0 + libm::cos(core::f64::consts::PI * progress))
}

/// Images `[N, 3, h, w]`, normalized by the recorded per-channel statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub mean: [f64; 3],
    pub std: [f64; 3],
    pub split: String,
}

/// Per-channel mean and population standard deviation of `[N, 3, H, W]`.
pub fn channel_stats(images: &Tensor<f32>) -> Result<([f64; 3], [f64; 3])> {
    let (n, c, h, w) = images.dims4()?;
    if c != 3 {
        return Err(Error::dim("channel_stats", format!("expected 3 channels, got {c}")));
    }
    let plane = h * w;
    let (mut mean, mut std) = ([0.0; 3], [0.0; 3]);
    for ch in 0..3 {
        let (mut s, mut s2) = (0.0f64, 0.0f64);
        for b in 0..n {
            for &v in &images.data()[(b * 3 + ch) * plane..(b * 3 + ch + 1) * plane] {
                s += v as f64;
                s2 += v as f64 * v as f64;
            }
        }
        let count = (n * plane) as f64;
        mean[ch] = s / count;
        std[ch] = libm::sqrt((s2 / count - mean[ch] * mean[ch]).max(0.0));
    }
    Ok((mean, std))
}

impl Dataset {
    /// Builds a dataset from raw images, normalizing with the given
    /// statistics (or the images' own when `stats` is `None`).
    pub fn from_raw(
        mut images: Tensor<f32>,
        labels: Vec<usize>,
        num_classes: usize,
        stats: Option<([f64; 3], [f64; 3])>,
        split: &str,
    ) -> Result<Self> {
        let (n, _, h, w) = images.dims4()?;
        if labels.len() != n {
            return Err(Error::Data(format!("{} labels for {n} images", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!("label {bad} out of range for {num_classes} classes")));
        }
        let (mean, std) = match stats {
            Some(s) => s,
            None => channel_stats(&images)?,
        };
        let plane = h * w;
        for (i, v) in images.data_mut().iter_mut().enumerate() {
            let ch = (i / plane) % 3;
            let s = if std[ch] > 0.0 { std[ch] } else { 1.0 };
            *v = ((*v as f64 - mean[ch]) / s) as f32;
        }
        if images.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite pixel after normalization".into()));
        }
        Ok(Self { images, labels, num_classes, mean, std, split: split.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> (usize, usize) {
        let s = self.images.shape();
        (s[2], s[3])
    }

    /// Stacks the listed samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        let s = self.images.shape();
        let per = s[1] * s[2] * s[3];
        let mut data = Vec::with_capacity(per * indices.len());
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let x = Tensor::from_vec(&[indices.len(), s[1], s[2], s[3]], data).expect("batch shape");
        (x, indices.iter().map(|&i| self.labels[i]).collect())
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let (images, labels) = self.batch(&idx);
        Self { images, labels, ..self.clone() }
    }

    /// Zero-pads (after normalization, i.e. with the channel mean) on the
    /// bottom and right up to the next multiple of 32.
    pub fn padded_to_multiple(&self) -> Self {
        let (n, c, h, w) = self.images.dims4().expect("rank-4 images");
        let (ph, pw) = (h.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE, w.div_ceil(INPUT_MULTIPLE) * INPUT_MULTIPLE);
        if (ph, pw) == (h, w) {
            return self.clone();
        }
        let mut out = Tensor::zeros(&[n, c, ph, pw]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..h {
                    let src = self.images.index4(b, ch, y, 0);
                    let dst = out.index4(b, ch, y, 0);
                    out.data_mut()[dst..dst + w].copy_from_slice(&self.images.data()[src..src + w]);
                }
            }
        }
        Self { images: out, ..self.clone() }
    }
}

/// Class-conditional Gaussian blobs: class `k` puts a bump at its own cell
/// of a grid over the image, with a class-specific colour, plus small
/// pixel noise. Labels cycle `i % classes`.
pub fn synthetic_dataset(seed: u64, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    if classes == 0 || n < classes {
        return Err(Error::Data(format!("need n >= classes >= 1, got n={n}, classes={classes}")));
    }
    if size == 0 {
        return Err(Error::Data("image size must be positive".into()));
    }
    let grid = (1..).find(|g| g * g >= classes).unwrap_or(1);
    let cell = size as f64 / grid as f64;
    let sigma = cell / 3.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = size * size;
    let mut data = vec![0.0f32; n * 3 * plane];
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        let (cy, cx) = (((k / grid) as f64 + 0.5) * cell, ((k % grid) as f64 + 0.5) * cell);
        let colour = [1.0, 0.5 + 0.5 * ((k % 3) as f64), 1.0 - 0.25 * ((k % 4) as f64)];
        for ch in 0..3 {
            for y in 0..size {
                for x in 0..size {
                    let (dy, dx) = (y as f64 + 0.5 - cy, x as f64 + 0.5 - cx);
                    let d2 = dy * dy + dx * dx;
                    let blob = colour[ch] * libm::exp(-d2 / (2.0 * sigma * sigma));
                    let noise: f64 = rng.sample(StandardNormal);
                    data[(i * 3 + ch) * plane + y * size + x] = (blob + 0.05 * noise) as f32;
                }
            }
        }
    }
    let images = Tensor::from_vec(&[n, 3, size, size], data)?;
    Dataset::from_raw(images, labels, classes, None, "synthetic")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub hyper: Hyper,
    /// Fraction of all steps spent in linear warmup.
    pub warmup_fraction: f64,
    pub seed: u64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            optimizer: OptimizerKind::AdamW,
            hyper: Hyper::default(),
            warmup_fraction: 0.05,
            seed: 0,
        }
    }
}

/// One row of the metrics history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    /// Training accuracy of the train-mode forward passes.
    pub top1: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

pub const METRICS_CSV_HEADER: &str = "epoch,loss,top1,lr";

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for m in history {
        s.push_str(&format!("{},{},{},{}\n", m.epoch, m.loss, m.top1, m.lr));
    }
    s
}

/// Trains a fresh model built from `(config, opts.seed)`.
pub fn train_loop(config: &ModelConfig, data: &Dataset, opts: &TrainOptions) -> Result<(Model<f32>, Vec<EpochMetrics>)> {
    let mut model = Model::new(config, opts.seed)?;
    let history = train_model(&mut model, data, opts, |_| {})?;
    Ok((model, history))
}

/// Trains `model` in place, calling `on_epoch` after every epoch.
pub fn train_model(
    model: &mut Model<f32>,
    data: &Dataset,
    opts: &TrainOptions,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<Vec<EpochMetrics>> {
    if data.num_classes > model.config().num_classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, model predicts {}",
            data.num_classes,
            model.config().num_classes
        )));
    }
    if data.is_empty() || opts.batch_size == 0 {
        return Err(Error::Data("empty dataset or zero batch size".into()));
    }
    let data = data.padded_to_multiple();
    let n = data.len();
    let steps_per_epoch = n.div_ceil(opts.batch_size);
    let total = opts.epochs * steps_per_epoch;
    let warmup = libm::round(opts.warmup_fraction * total as f64) as usize;
    let warmup = warmup.min(total.saturating_sub(1));
    let mut state = OptimizerState::new(opts.optimizer, opts.hyper, model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_da7a);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut step = 0;
    for epoch in 0..opts.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut lr) = (0.0f64, 0usize, 0.0);
        for chunk in order.chunks(opts.batch_size) {
            let (x, labels) = data.batch(chunk);
            model.params_mut().zero_grad();
            let logits = model.forward(&x, Mode::Train)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {epoch}, step {step}")));
            }
            loss_sum += loss as f64 * chunk.len() as f64;
            let k = logits.shape()[1];
            correct += labels.iter().enumerate().filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l).count();
            model.backward(&grad)?;
            lr = cosine_lr(step, total, opts.hyper.lr, warmup);
            state.hyper.lr = lr;
            state.apply(model.params_mut())?;
            step += 1;
        }
        let m = EpochMetrics { epoch, loss: loss_sum / n as f64, top1: correct as f64 / n as f64, lr };
        on_epoch(&m);
        history.push(m);
    }
    Ok(history)
}

/// Eval-mode top-1 accuracy.
pub fn evaluate<T: Real>(model: &Model<T>, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let data = data.padded_to_multiple();
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, labels) = data.batch(chunk);
        let logits = model.infer(&x.cast())?;
        let k = logits.shape()[1];
        correct += labels.iter().enumerate().filter(|&(i, &l)| argmax(&logits.data()[i * k..(i + 1) * k]) == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}
