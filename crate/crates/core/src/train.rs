//! Cross-entropy training with Adam, optionally under pruning masks, and a
//! finite-difference gradient checker.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Fault, Tape};
use crate::error::{Error, Result};
use crate::model::{infer_shapes, LayerKind, Model};
use crate::ops::{self, BN_MOMENTUM};
use crate::prune::PruneMask;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.001, beta1: 0.9, beta2: 0.999, eps: 1e-8, batch_size: 32, epochs: 15, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::invalid("Adam eps must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Images (N×C×S×S) with one class label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl LabeledSet {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>) -> Result<Self> {
        let (n, _, _, _) = images.dims4("labeled set")?;
        if n != labels.len() {
            return Err(Error::shape("labeled set", format!("{n} images, {} labels", labels.len())));
        }
        Ok(LabeledSet { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        Ok((self.images.gather_batch(rows)?, rows.iter().map(|&r| self.labels[r]).collect()))
    }
}

/// Mean cross-entropy of softmax(logits) against `labels`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(ops::softmax_cross_entropy(logits, labels)?.0)
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub m: BTreeMap<String, Tensor<f32>>,
    pub v: BTreeMap<String, Tensor<f32>>,
    pub t: u64,
}

/// One bias-corrected Adam update of every parameter that has a gradient.
pub fn adam_step(
    params: &mut BTreeMap<String, Tensor<f32>>,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    config: &TrainConfig,
) -> Result<()> {
    for (name, g) in grads {
        let p = params.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(Error::shape("adam_step", format!("{name}: grad {:?} vs param {:?}", g.shape(), p.shape())));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (config.beta1 as f64, config.beta2 as f64);
    let c1 = 1.0 - libm::pow(b1, t as f64);
    let c2 = 1.0 - libm::pow(b2, t as f64);
    let (lr, eps) = (config.learning_rate as f64, config.eps as f64);
    for (name, g) in grads {
        let p = params.get_mut(name).expect("checked above");
        let m = state.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()).expect("shape of a tensor"));
        let v = state.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()).expect("shape of a tensor"));
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            let gd = gi as f64;
            let mn = b1 * *mi as f64 + (1.0 - b1) * gd;
            let vn = b2 * *vi as f64 + (1.0 - b2) * gd * gd;
            *mi = mn as f32;
            *vi = vn as f32;
            let step = lr * (mn / c1) / (libm::sqrt(vn / c2) + eps);
            *w = (*w as f64 - step) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: Option<f64>,
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Index of the largest logit per row (first wins on ties).
pub fn predictions(logits: &Tensor<f32>) -> Result<Vec<usize>> {
    let (_, c) = logits.dims2("predictions")?;
    Ok(logits.data().chunks_exact(c).map(argmax).collect())
}

/// Batched inference-mode loss and accuracy.
pub fn evaluate_loss(model: &Model, set: &LabeledSet, batch_size: usize) -> Result<(f64, f64)> {
    if set.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let mut loss = 0.0;
    let mut correct = 0usize;
    let rows: Vec<usize> = (0..set.len()).collect();
    for chunk in rows.chunks(batch_size.max(1)) {
        let (x, y) = set.batch(chunk)?;
        let logits = model.forward(&x)?;
        loss += cross_entropy(&logits, &y)? as f64 * chunk.len() as f64;
        correct += predictions(&logits)?.iter().zip(&y).filter(|(p, t)| p == t).count();
    }
    Ok((loss / set.len() as f64, correct as f64 / set.len() as f64))
}

/// One optimisation step on a batch; returns the batch loss and number of
/// correct training predictions.
fn train_step(
    model: &mut Model,
    x: Tensor<f32>,
    y: &[usize],
    state: &mut AdamState,
    config: &TrainConfig,
    masks: Option<&PruneMask>,
    bn_area: &BTreeMap<String, usize>,
) -> Result<(f64, usize)> {
    let mut tape = Tape::<f32>::new();
    let (logits, bn_stats) = model.forward_on_tape(&mut tape, &model.params, &model.buffers, x, true)?;
    let correct = predictions(tape.value(logits)?)?.iter().zip(y).filter(|(p, t)| p == t).count();
    let loss = tape.softmax_cross_entropy(logits, y)?;
    let loss_value = tape.value(loss)?.data()[0] as f64;
    let mut grads = tape.backward(loss)?.into_params();
    drop(tape);
    if let Some(m) = masks {
        m.apply(&mut grads);
    }
    adam_step(&mut model.params, &grads, state, config)?;
    if let Some(m) = masks {
        m.apply(&mut model.params);
    }
    for (layer, stats) in bn_stats {
        let hw = bn_area.get(&layer).copied().ok_or_else(|| Error::MissingTensor(layer.clone()))?;
        let mean_key = format!("{layer}.running_mean");
        let var_key = format!("{layer}.running_var");
        let mut rm = model.buffers.remove(&mean_key).ok_or_else(|| Error::MissingTensor(mean_key.clone()))?;
        let mut rv = model.buffers.remove(&var_key).ok_or_else(|| Error::MissingTensor(var_key.clone()))?;
        ops::update_running_stats(&mut rm, &mut rv, &stats, y.len() * hw, BN_MOMENTUM);
        model.buffers.insert(mean_key, rm);
        model.buffers.insert(var_key, rv);
    }
    Ok((loss_value, correct))
}

/// Spatial area each batch-norm layer normalises over, per sample.
fn bn_areas(model: &Model) -> Result<BTreeMap<String, usize>> {
    let shapes = infer_shapes(model.layers(), model.config.in_channels, model.config.input_size)?;
    Ok(model
        .layers()
        .iter()
        .zip(shapes)
        .filter(|(l, _)| l.kind == LayerKind::BatchNorm)
        .map(|(l, (_, h, w))| (l.name.clone(), h * w))
        .collect())
}

/// Trains with shuffled mini-batches (seeded, last partial batch kept).
/// With `masks`, masked gradients are zeroed before each Adam step and masked
/// weights re-zeroed after it. `on_epoch` sees each record as it completes.
pub fn train(
    model: &Model,
    train_set: &LabeledSet,
    val_set: Option<&LabeledSet>,
    config: &TrainConfig,
    masks: Option<&PruneMask>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set"));
    }
    if let Some(m) = masks {
        m.check_against(&model.params)?;
    }
    let mut model = model.clone();
    let mut history = TrainHistory::default();
    let mut state = AdamState::default();
    let bn_area = bn_areas(&model)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (x, y) = train_set.batch(chunk)?;
            let (l, c) = train_step(&mut model, x, &y, &mut state, config, masks, &bn_area)?;
            loss_sum += l * chunk.len() as f64;
            correct += c;
        }
        let (val_loss, val_accuracy) = match val_set {
            Some(v) if !v.is_empty() => {
                let (l, a) = evaluate_loss(&model, v, config.batch_size)?;
                (Some(l), Some(a))
            }
            _ => (None, None),
        };
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_loss,
            val_accuracy,
        };
        on_epoch(&rec);
        history.epochs.push(rec);
    }
    Ok((model, history))
}

/// Fine-tunes a pruned model with its masks held fixed.
pub fn masked_finetune(
    model: &Model,
    masks: &PruneMask,
    train_set: &LabeledSet,
    val_set: Option<&LabeledSet>,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    masks.check_against(&model.params)?;
    let (mut out, history) = train(model, train_set, val_set, config, Some(masks), on_epoch)?;
    masks.apply(&mut out.params);
    out.masks = Some(masks.clone());
    Ok((out, history))
}

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Minimum number of sampled parameter entries.
    pub samples: usize,
    pub step: f64,
    pub seed: u64,
    /// Denominator floor of the relative error.
    pub floor: f64,
    #[doc(hidden)]
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { samples: 200, step: 1e-5, seed: 0, floor: 1e-5, fault: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Worst relative error per parameter kind (conv, bn, linear).
    pub per_kind: BTreeMap<String, f64>,
}

fn param_kind(model: &Model, name: &str) -> &'static str {
    let layer = name.rsplit_once('.').map_or(name, |(l, _)| l);
    match model.layers().iter().find(|l| l.name == layer).map(|l| l.kind) {
        Some(LayerKind::Conv) => "conv",
        Some(LayerKind::BatchNorm) => "bn",
        Some(LayerKind::Linear) => "linear",
        _ => "other",
    }
}

/// Compares analytic f64 gradients of the training-mode cross-entropy loss
/// with central differences on a random subsample of parameter entries that
/// covers every parameter tensor.
///
/// The relative error of one entry is `|a − n| / max(|a|, |n|, floor)`.
pub fn gradient_check(
    model: &Model,
    batch: &Tensor<f32>,
    labels: &[usize],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut params: BTreeMap<String, Tensor<f64>> = model.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let buffers: BTreeMap<String, Tensor<f64>> = model.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
    let x: Tensor<f64> = batch.cast();

    let loss_at = |params: &BTreeMap<String, Tensor<f64>>| -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let (logits, _) = model.forward_on_tape(&mut tape, params, &buffers, x.clone(), true)?;
        cross_entropy(tape.value(logits)?, labels)
    };

    let mut tape = Tape::<f64>::new();
    tape.inject_fault(opts.fault);
    let (logits, _) = model.forward_on_tape(&mut tape, &params, &buffers, x.clone(), true)?;
    let loss = tape.softmax_cross_entropy(logits, labels)?;
    let analytic = tape.backward(loss)?.into_params();
    drop(tape);

    let names: Vec<String> = params.keys().cloned().collect();
    let quotas = sample_quotas(&names.iter().map(|n| params[n].len()).collect::<Vec<_>>(), opts.samples);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, per_kind: BTreeMap::new() };
    for (name, &quota) in names.iter().zip(&quotas) {
        let len = params[name].len();
        let grad = analytic.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        for i in rand::seq::index::sample(&mut rng, len, quota) {
            let orig = params[name].data()[i];
            params.get_mut(name).expect("present").data_mut()[i] = orig + opts.step;
            let lp = loss_at(&params)?;
            params.get_mut(name).expect("present").data_mut()[i] = orig - opts.step;
            let lm = loss_at(&params)?;
            params.get_mut(name).expect("present").data_mut()[i] = orig;
            let numeric = (lp - lm) / (2.0 * opts.step);
            let a = grad.data()[i];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(opts.floor);
            report.max_rel_error = report.max_rel_error.max(err);
            let k = report.per_kind.entry(param_kind(model, name).into()).or_insert(0.0);
            *k = k.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Distinct entries to draw from each tensor: an even share capped by the
/// tensor length, with the shortfall moved to tensors that still have room.
fn sample_quotas(lens: &[usize], total: usize) -> Vec<usize> {
    let share = total.div_ceil(lens.len().max(1)).max(2);
    let mut quotas: Vec<usize> = lens.iter().map(|&l| l.min(share)).collect();
    let mut missing = total.saturating_sub(quotas.iter().sum());
    for (q, &l) in quotas.iter_mut().zip(lens) {
        let extra = (l - *q).min(missing);
        *q += extra;
        missing -= extra;
    }
    quotas
}
