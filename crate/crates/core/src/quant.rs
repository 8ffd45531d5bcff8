//! Post-training affine 8-bit quantization.
//!
//! The model is first folded: each conv absorbs its batch norm (and a
//! following ReLU), and each residual add absorbs its ReLU. Activation
//! ranges are observed at the outputs of the folded graph's compute nodes
//! (the input stub, every conv/add, and the logits). Weights are quantized
//! per tensor. Values are unsigned, `q = clamp(round(x/scale) + zp, 0, 255)`
//! with ties rounded to even.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, Model, ModelConfig};
use crate::ops::{self, BN_EPS};
use crate::tensor::Tensor;

pub const DEFAULT_BITS: u32 = 8;
/// Activation site of the model input.
pub const INPUT_SITE: &str = "input";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    pub scale: f32,
    pub zero_point: i32,
    pub bits: u32,
    pub qmin: i32,
    pub qmax: i32,
    /// Real value added back on dequantization; nonzero only for a
    /// degenerate (constant) range.
    #[serde(default)]
    pub offset: f32,
}

/// Round half to even (the FPU's default mode). Adding then subtracting
/// 2²³ leaves no fraction bits for |x| < 2²³; larger values are integral.
#[inline(always)]
fn rint(x: f32) -> f32 {
    const TWO_23: f32 = 8_388_608.0;
    let a = x.abs();
    if a < TWO_23 {
        ((a + TWO_23) - TWO_23).copysign(x)
    } else {
        x
    }
}

/// Bound below which [`rint_small`] is exact; any code is far inside it.
const RINT_LIMIT: f32 = 4_194_304.0;

/// [`rint`] without the large-magnitude branch, for `|x| ≤ RINT_LIMIT`.
#[inline(always)]
fn rint_small(x: f32) -> f32 {
    const TWO_23: f32 = 8_388_608.0;
    ((x.abs() + TWO_23) - TWO_23).copysign(x)
}

impl QuantParams {
    /// Affine parameters mapping `[min, max]` onto `[0, 2^bits − 1]`.
    ///
    /// `min == max` yields scale 1, zero point `qmin` and the constant stored
    /// as an offset, so constants round-trip exactly.
    pub fn from_range(min: f32, max: f32, bits: u32) -> Result<Self> {
        if !(1..=8).contains(&bits) {
            return Err(Error::invalid(format!("{bits}-bit quantization is not supported")));
        }
        if !(min.is_finite() && max.is_finite()) || min > max {
            return Err(Error::invalid(format!("invalid calibration range [{min}, {max}]")));
        }
        let (qmin, qmax) = (0i32, (1i32 << bits) - 1);
        if min == max {
            return Ok(QuantParams { scale: 1.0, zero_point: qmin, bits, qmin, qmax, offset: min });
        }
        let scale = (max - min) / (qmax - qmin) as f32;
        let zero_point = (rint(qmin as f32 - min / scale) as i32).clamp(qmin, qmax);
        Ok(QuantParams { scale, zero_point, bits, qmin, qmax, offset: 0.0 })
    }

    /// Like [`from_range`](Self::from_range) with the range widened to
    /// contain zero, so that 0.0 (padding, pruned weights, ReLU floor) is
    /// exactly representable.
    pub fn from_range_with_zero(min: f32, max: f32, bits: u32) -> Result<Self> {
        if min == max && min != 0.0 {
            return Self::from_range(min, max, bits);
        }
        Self::from_range(min.min(0.0), max.max(0.0), bits)
    }

    pub fn quant_range(&self) -> i64 {
        (self.qmax - self.qmin) as i64 + 1
    }

    #[inline]
    pub fn quantize(&self, x: f32) -> i32 {
        let q = rint((x - self.offset) / self.scale) + self.zero_point as f32;
        // `as` saturates; NaN maps to 0 and is then clamped into range.
        (q as i32).clamp(self.qmin, self.qmax)
    }

    #[inline]
    pub fn dequantize(&self, q: i32) -> f32 {
        self.scale * (q - self.zero_point) as f32 + self.offset
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.scale > 0.0
            && self.scale.is_finite()
            && self.qmin <= self.zero_point
            && self.zero_point <= self.qmax
            && (1..=8).contains(&self.bits)
            && self.quant_range() == 1i64 << self.bits;
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid quantization parameters {self:?}")))
        }
    }
}

/// Quantizes `x` with parameters derived from `[min, max]`.
pub fn quantize_tensor(x: &Tensor<f32>, min: f32, max: f32, bits: u32) -> Result<(Tensor<u8>, QuantParams)> {
    let p = QuantParams::from_range(min, max, bits)?;
    Ok((x.map(|v| p.quantize(v) as u8), p))
}

pub fn dequantize(q: &Tensor<u8>, params: &QuantParams) -> Tensor<f32> {
    q.map(|v| params.dequantize(v as i32))
}

/// `scale·(q − zp) + offset` in f64, where every product is exact.
fn exact_dequant(q: &Tensor<u8>, p: &QuantParams) -> Tensor<f64> {
    q.map(|v| p.scale as f64 * (v as i32 - p.zero_point) as f64 + p.offset as f64)
}

/// Recovers the exact grid values behind an f32 fake-quantized tensor.
fn regrid(x: &Tensor<f32>, p: &QuantParams) -> Tensor<f64> {
    x.map(|v| p.scale as f64 * (p.quantize(v) - p.zero_point) as f64 + p.offset as f64)
}

fn exact_bias(bq: &[i32], xp: &QuantParams, wp: &QuantParams) -> Result<Tensor<f64>> {
    let s = xp.scale as f64 * wp.scale as f64;
    Tensor::new(&[bq.len()], bq.iter().map(|&q| q as f64 * s).collect())
}

/// Rounds every value onto the quantization grid in place.
fn fake_quant(values: &mut [f32], p: &QuantParams) {
    for v in values {
        *v = p.dequantize(p.quantize(*v));
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Range {
    pub min: f32,
    pub max: f32,
}

impl Range {
    fn of(values: &[f32]) -> Option<Range> {
        let mut it = values.iter().copied();
        let first = it.next()?;
        let (min, max) = it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v)));
        Some(Range { min, max })
    }

    fn merge(self, o: Range) -> Range {
        Range { min: self.min.min(o.min), max: self.max.max(o.max) }
    }
}

/// Running min/max per activation site.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CalibrationStats {
    pub sites: BTreeMap<String, Range>,
    pub batches: usize,
}

impl CalibrationStats {
    fn observe(&mut self, site: &str, values: &[f32]) {
        if let Some(r) = Range::of(values) {
            self.sites
                .entry(site.to_string())
                .and_modify(|e| *e = e.merge(r))
                .or_insert(r);
        }
    }

    /// Elementwise min/max of two sets of statistics.
    pub fn merge(&self, other: &CalibrationStats) -> CalibrationStats {
        let mut out = self.clone();
        for (k, r) in &other.sites {
            out.sites.entry(k.clone()).and_modify(|e| *e = e.merge(*r)).or_insert(*r);
        }
        out.batches += other.batches;
        out
    }
}

/// Node of the folded graph.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "op")]
pub enum QOp {
    Input,
    Conv { stride: usize, padding: usize, relu: bool },
    Add { relu: bool },
    MaxPool { kernel: usize, stride: usize, padding: usize },
    AvgPool,
    Linear,
}

impl QOp {
    /// Whether this node's output is an activation site with its own
    /// quantization parameters. Pooling inherits its input's parameters.
    pub fn is_site(&self) -> bool {
        matches!(self, QOp::Input | QOp::Conv { .. } | QOp::Add { .. } | QOp::Linear)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QLayer {
    pub name: String,
    #[serde(flatten)]
    pub op: QOp,
    pub inputs: Vec<usize>,
}

/// Float model with batch norm folded into the convolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldedModel {
    pub config: ModelConfig,
    pub layers: Vec<QLayer>,
    pub weights: BTreeMap<String, Tensor<f32>>,
    pub biases: BTreeMap<String, Tensor<f32>>,
}

/// `w′ = w·γ/√(σ²+ε)`, `b′ = β − γμ/√(σ²+ε)` per output channel.
pub fn fold_batchnorm(
    weight: &Tensor<f32>,
    gamma: &Tensor<f32>,
    beta: &Tensor<f32>,
    mean: &Tensor<f32>,
    var: &Tensor<f32>,
    eps: f64,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let o = weight.shape()[0];
    for (n, t) in [("gamma", gamma), ("beta", beta), ("mean", mean), ("var", var)] {
        if t.shape() != [o] {
            return Err(Error::shape("fold_batchnorm", format!("{n} {:?} for {o} channels", t.shape())));
        }
    }
    let per = weight.len() / o;
    let mut w = weight.data().to_vec();
    let mut b = Vec::with_capacity(o);
    for c in 0..o {
        let d = var.data()[c] as f64 + eps;
        if d <= 0.0 {
            return Err(Error::NonPositiveVariance(format!("channel {c}")));
        }
        let k = gamma.data()[c] as f64 / libm::sqrt(d);
        for v in &mut w[c * per..(c + 1) * per] {
            *v = (*v as f64 * k) as f32;
        }
        b.push((beta.data()[c] as f64 - k * mean.data()[c] as f64) as f32);
    }
    Ok((Tensor::new(weight.shape(), w)?, Tensor::new(&[o], b)?))
}

fn tensor<'a>(m: &'a BTreeMap<String, Tensor<f32>>, name: &str) -> Result<&'a Tensor<f32>> {
    m.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

impl FoldedModel {
    /// Folds every conv→bn(→relu) chain and add→relu pair. Any other use of
    /// batch norm or ReLU is rejected.
    pub fn fold(model: &Model) -> Result<FoldedModel> {
        let layers = model.layers();
        let mut consumers = vec![0usize; layers.len()];
        for l in layers {
            for &i in &l.inputs {
                consumers[i] += 1;
            }
        }
        let mut out: Vec<QLayer> = Vec::new();
        let mut alias = vec![usize::MAX; layers.len()];
        let mut weights = BTreeMap::new();
        let mut biases = BTreeMap::new();
        for (i, l) in layers.iter().enumerate() {
            let inputs: Vec<usize> = l.inputs.iter().map(|&j| alias[j]).collect();
            let single_src = |k: usize| l.inputs.get(k).map(|&j| (j, consumers[j] == 1));
            match l.kind {
                LayerKind::Input => {
                    out.push(QLayer { name: INPUT_SITE.into(), op: QOp::Input, inputs });
                    alias[i] = out.len() - 1;
                }
                LayerKind::Conv => {
                    weights.insert(l.name.clone(), tensor(&model.params, &l.param("weight"))?.clone());
                    biases.insert(l.name.clone(), Tensor::zeros(&[l.out_channels])?);
                    out.push(QLayer {
                        name: l.name.clone(),
                        op: QOp::Conv { stride: l.stride, padding: l.padding, relu: false },
                        inputs,
                    });
                    alias[i] = out.len() - 1;
                }
                LayerKind::BatchNorm => {
                    let (src, exclusive) = single_src(0).ok_or_else(|| Error::invalid("batch norm without input"))?;
                    let target = alias[src];
                    let ok = exclusive && matches!(out[target].op, QOp::Conv { relu: false, .. });
                    if !ok || layers[src].kind != LayerKind::Conv {
                        return Err(Error::Unsupported(format!("batch norm `{}` does not directly follow a conv", l.name)));
                    }
                    let conv = out[target].name.clone();
                    let (w, b) = fold_batchnorm(
                        tensor(&weights, &conv)?,
                        tensor(&model.params, &l.param("gamma"))?,
                        tensor(&model.params, &l.param("beta"))?,
                        tensor(&model.buffers, &l.param("running_mean"))?,
                        tensor(&model.buffers, &l.param("running_var"))?,
                        BN_EPS,
                    )?;
                    weights.insert(conv.clone(), w);
                    biases.insert(conv, b);
                    alias[i] = target;
                }
                LayerKind::Relu => {
                    let (src, exclusive) = single_src(0).ok_or_else(|| Error::invalid("relu without input"))?;
                    let target = alias[src];
                    match &mut out[target].op {
                        QOp::Conv { relu, .. } | QOp::Add { relu } if exclusive && !*relu => *relu = true,
                        _ => {
                            return Err(Error::Unsupported(format!("relu `{}` cannot be fused into its producer", l.name)));
                        }
                    }
                    alias[i] = target;
                }
                LayerKind::MaxPool => {
                    let op = QOp::MaxPool { kernel: l.kernel, stride: l.stride, padding: l.padding };
                    out.push(QLayer { name: l.name.clone(), op, inputs });
                    alias[i] = out.len() - 1;
                }
                LayerKind::AvgPool => {
                    out.push(QLayer { name: l.name.clone(), op: QOp::AvgPool, inputs });
                    alias[i] = out.len() - 1;
                }
                LayerKind::Linear => {
                    weights.insert(l.name.clone(), tensor(&model.params, &l.param("weight"))?.clone());
                    biases.insert(l.name.clone(), tensor(&model.params, &l.param("bias"))?.clone());
                    out.push(QLayer { name: l.name.clone(), op: QOp::Linear, inputs });
                    alias[i] = out.len() - 1;
                }
                LayerKind::Add => {
                    out.push(QLayer { name: l.name.clone(), op: QOp::Add { relu: false }, inputs });
                    alias[i] = out.len() - 1;
                }
            }
        }
        Ok(FoldedModel { config: model.config.clone(), layers: out, weights, biases })
    }

    pub fn sites(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().filter(|l| l.op.is_site()).map(|l| l.name.as_str())
    }

    /// Float forward pass; with `observer`, records every site's range.
    pub fn forward(&self, x: &Tensor<f32>, mut observer: Option<&mut CalibrationStats>) -> Result<Tensor<f32>> {
        let mut vals: Vec<Option<Tensor<f32>>> = vec![None; self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            let arg = |k: usize| -> Result<&Tensor<f32>> {
                vals[l.inputs[k]].as_ref().ok_or_else(|| Error::invalid(format!("{}: missing input", l.name)))
            };
            let y = match &l.op {
                QOp::Input => x.clone(),
                QOp::Conv { stride, padding, relu } => {
                    let y = ops::conv2d(arg(0)?, tensor(&self.weights, &l.name)?, Some(tensor(&self.biases, &l.name)?), *stride, *padding)?;
                    if *relu { ops::relu(&y) } else { y }
                }
                QOp::Add { relu } => {
                    let y = ops::add(arg(0)?, arg(1)?)?;
                    if *relu { ops::relu(&y) } else { y }
                }
                QOp::MaxPool { kernel, stride, padding } => ops::maxpool2d(arg(0)?, *kernel, *stride, *padding)?.0,
                QOp::AvgPool => ops::global_avgpool(arg(0)?)?,
                QOp::Linear => ops::linear(arg(0)?, tensor(&self.weights, &l.name)?, Some(tensor(&self.biases, &l.name)?))?,
            };
            if let (true, Some(obs)) = (l.op.is_site(), observer.as_deref_mut()) {
                obs.observe(&l.name, y.data());
            }
            vals[i] = Some(y);
        }
        vals.pop().flatten().ok_or(Error::Empty("folded graph"))
    }
}

/// Collects activation ranges of `model` over the calibration batches.
pub fn calibrate(model: &Model, batches: &[Tensor<f32>]) -> Result<CalibrationStats> {
    if batches.is_empty() {
        return Err(Error::Empty("calibration batches"));
    }
    let folded = FoldedModel::fold(model)?;
    let mut stats = CalibrationStats::default();
    for b in batches {
        folded.forward(b, Some(&mut stats))?;
        stats.batches += 1;
    }
    Ok(stats)
}

/// Where activation quantization parameters come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationSites {
    /// Calibrated parameters at every site.
    #[default]
    All,
    /// Calibrated parameters only at the input and logits; interior sites
    /// derive per-sample parameters from the observed values at run time.
    Boundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// Quantize→dequantize at every site, f32 arithmetic in between.
    Simulated,
    /// u8 storage, i32 accumulation, f32 requantization multipliers.
    Integer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    pub data: Tensor<u8>,
    pub params: QuantParams,
}

/// Per-layer data derived from the stored tensors for fast execution.
#[derive(Clone, Debug, PartialEq)]
struct Kernel {
    /// `(q − zp)` of the weights, `out_padded × k_padded`, zero padded.
    centered: Vec<i16>,
    out: usize,
    out_padded: usize,
    k: usize,
    k_padded: usize,
    /// Exact dequantized weights for the simulated path.
    dequant: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedModel {
    pub config: ModelConfig,
    pub layers: Vec<QLayer>,
    pub weights: BTreeMap<String, QTensor>,
    pub biases: BTreeMap<String, Tensor<f32>>,
    pub activations: BTreeMap<String, QuantParams>,
    pub activation_sites: ActivationSites,
    pub folded: bool,
    kernels: BTreeMap<String, Kernel>,
}

/// Largest possible `|q − zp|` product for 8-bit unsigned operands.
const MAX_CENTERED_PRODUCT: i64 = 255 * 255;
/// Quantized biases are clamped here; with accumulators bounded by
/// `i32::MAX / 2` at build time the biased sum cannot overflow.
const BIAS_LIMIT: i32 = i32::MAX / 2;

impl QuantizedModel {
    /// Assembles a quantized model from its stored parts, validating
    /// parameters and the i32 accumulator bound of every layer.
    pub fn from_parts(
        config: ModelConfig,
        layers: Vec<QLayer>,
        weights: BTreeMap<String, QTensor>,
        biases: BTreeMap<String, Tensor<f32>>,
        activations: BTreeMap<String, QuantParams>,
        activation_sites: ActivationSites,
    ) -> Result<Self> {
        let mut kernels = BTreeMap::new();
        for l in &layers {
            if l.op.is_site() {
                let required = match activation_sites {
                    ActivationSites::All => true,
                    ActivationSites::Boundary => matches!(l.op, QOp::Input | QOp::Linear),
                };
                match activations.get(&l.name) {
                    Some(p) => p.validate()?,
                    None if required => return Err(Error::MissingTensor(format!("activation parameters for `{}`", l.name))),
                    None => {}
                }
            }
            if !matches!(l.op, QOp::Conv { .. } | QOp::Linear) {
                continue;
            }
            let qt = weights.get(&l.name).ok_or_else(|| Error::MissingTensor(format!("{}.weight", l.name)))?;
            qt.params.validate()?;
            let shape = qt.data.shape();
            let out = shape[0];
            let k = qt.data.len() / out;
            let b = biases.get(&l.name).ok_or_else(|| Error::MissingTensor(format!("{}.bias", l.name)))?;
            if b.shape() != [out] {
                return Err(Error::shape("quantized model", format!("{}: bias {:?} for {out} outputs", l.name, b.shape())));
            }
            if MAX_CENTERED_PRODUCT * k as i64 > i32::MAX as i64 / 2 {
                return Err(Error::Unsupported(format!(
                    "`{}` accumulates {k} products and may overflow an i32 accumulator",
                    l.name
                )));
            }
            let k_padded = k.div_ceil(2) * 2;
            let out_padded = out.div_ceil(kernels::OB) * kernels::OB;
            let mut centered = vec![0i16; out_padded * k_padded];
            for (o, row) in qt.data.data().chunks_exact(k).enumerate() {
                for (j, &q) in row.iter().enumerate() {
                    centered[o * k_padded + j] = (q as i32 - qt.params.zero_point) as i16;
                }
            }
            kernels.insert(l.name.clone(), Kernel { centered, out, out_padded, k, k_padded, dequant: exact_dequant(&qt.data, &qt.params) });
        }
        Ok(QuantizedModel { config, layers, weights, biases, activations, activation_sites, folded: true, kernels })
    }

    /// Sum of stored weight bytes (u8), for size comparisons.
    pub fn weight_bytes(&self) -> usize {
        self.weights.values().map(|w| w.data.len()).sum()
    }

    fn check_input(&self, x: &Tensor<f32>) -> Result<usize> {
        let (n, c, h, w) = x.dims4("quantized_forward")?;
        let s = self.config.input_size;
        if c != self.config.in_channels || h != s || w != s {
            return Err(Error::shape("quantized_forward", format!("batch {:?} does not match N×{}×{s}×{s}", x.shape(), self.config.in_channels)));
        }
        Ok(n)
    }

    fn static_params(&self, site: &str) -> Option<&QuantParams> {
        self.activations.get(site)
    }

    fn kernel(&self, name: &str) -> Result<&Kernel> {
        self.kernels.get(name).ok_or_else(|| Error::MissingTensor(format!("{name}.weight")))
    }

    fn bias(&self, name: &str) -> Result<&Tensor<f32>> {
        tensor(&self.biases, name)
    }

    fn site_params(&self, site: &str, values: impl FnOnce() -> Option<Range>) -> Result<QuantParams> {
        if let Some(p) = self.static_params(site) {
            return Ok(*p);
        }
        let r = values().ok_or(Error::Empty("activation"))?;
        QuantParams::from_range_with_zero(r.min, r.max, DEFAULT_BITS)
    }

    /// Logits for a batch. Each sample runs independently.
    pub fn forward(&self, x: &Tensor<f32>, mode: QuantMode) -> Result<Tensor<f32>> {
        let n = self.check_input(x)?;
        let mut rows = Vec::with_capacity(n);
        for s in 0..n {
            let xs = x.slice_batch(s, s + 1)?;
            rows.push(match mode {
                QuantMode::Simulated => self.forward_simulated(&xs)?,
                QuantMode::Integer => self.forward_integer(&xs)?,
            });
        }
        Tensor::concat_batch(&rows)
    }

    fn quantized_bias(&self, name: &str, input_scale: f32, weight_scale: f32) -> Result<Vec<i32>> {
        let s = input_scale * weight_scale;
        Ok(self.bias(name)?.data().iter().map(|&b| (rint(b / s) as i32).clamp(-BIAS_LIMIT, BIAS_LIMIT)).collect())
    }

    fn forward_simulated(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut vals: Vec<Option<(Tensor<f32>, QuantParams)>> = vec![None; self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            let arg = |k: usize| -> Result<&(Tensor<f32>, QuantParams)> {
                vals[l.inputs[k]].as_ref().ok_or_else(|| Error::invalid(format!("{}: missing input", l.name)))
            };
            let (mut y, inherited) = match &l.op {
                QOp::Input => (x.clone(), None),
                QOp::Conv { stride, padding, relu } => {
                    let (xin, xp) = arg(0)?;
                    let k = self.kernel(&l.name)?;
                    let wp = self.weights[&l.name].params;
                    let bq = self.quantized_bias(&l.name, xp.scale, wp.scale)?;
                    let b = exact_bias(&bq, xp, &wp)?;
                    let y: Tensor<f32> = ops::conv2d(&regrid(xin, xp), &k.dequant, Some(&b), *stride, *padding)?.cast();
                    (if *relu { ops::relu(&y) } else { y }, None)
                }
                QOp::Add { relu } => {
                    let y = ops::add(&arg(0)?.0, &arg(1)?.0)?;
                    (if *relu { ops::relu(&y) } else { y }, None)
                }
                QOp::MaxPool { kernel, stride, padding } => {
                    let (xin, xp) = arg(0)?;
                    (ops::maxpool2d(xin, *kernel, *stride, *padding)?.0, Some(*xp))
                }
                QOp::AvgPool => {
                    let (xin, xp) = arg(0)?;
                    (ops::global_avgpool(xin)?, Some(*xp))
                }
                QOp::Linear => {
                    let (xin, xp) = arg(0)?;
                    let k = self.kernel(&l.name)?;
                    let wp = self.weights[&l.name].params;
                    let bq = self.quantized_bias(&l.name, xp.scale, wp.scale)?;
                    let b = exact_bias(&bq, xp, &wp)?;
                    (ops::linear(&regrid(xin, xp), &k.dequant, Some(&b))?.cast(), None)
                }
            };
            let p = match inherited {
                Some(p) => p,
                None => self.site_params(&l.name, || Range::of(y.data()))?,
            };
            fake_quant(y.data_mut(), &p);
            vals[i] = Some((y, p));
        }
        Ok(vals.pop().flatten().ok_or(Error::Empty("quantized graph"))?.0)
    }

    fn forward_integer(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut vals: Vec<Option<QAct>> = vec![None; self.layers.len()];
        let mut last_use = vec![0usize; self.layers.len()];
        for (i, l) in self.layers.iter().enumerate() {
            for &j in &l.inputs {
                last_use[j] = i;
            }
        }
        let mut scratch = Scratch::default();
        for (i, l) in self.layers.iter().enumerate() {
            let arg = |k: usize| -> Result<&QAct> {
                vals[l.inputs[k]].as_ref().ok_or_else(|| Error::invalid(format!("{}: missing input", l.name)))
            };
            let y = match &l.op {
                QOp::Input => {
                    let (_, c, h, w) = x.dims4("quantized_forward")?;
                    let p = self.site_params(&l.name, || Range::of(x.data()))?;
                    QAct { data: x.data().iter().map(|&v| p.quantize(v) as u8).collect(), c, h, w, params: p }
                }
                QOp::Conv { stride, padding, relu } => {
                    let a = arg(0)?;
                    self.int_conv(&l.name, a, *stride, *padding, *relu, &mut scratch)?
                }
                QOp::Linear => {
                    let a = arg(0)?;
                    self.int_conv(&l.name, a, 1, 0, false, &mut scratch)?
                }
                QOp::Add { relu } => self.int_add(&l.name, arg(0)?, arg(1)?, *relu)?,
                QOp::MaxPool { kernel, stride, padding } => int_maxpool(arg(0)?, *kernel, *stride, *padding)?,
                QOp::AvgPool => int_avgpool(arg(0)?),
            };
            vals[i] = Some(y);
            for &j in &l.inputs {
                if last_use[j] == i {
                    vals[j] = None;
                }
            }
        }
        let out = vals.pop().flatten().ok_or(Error::Empty("quantized graph"))?;
        let logits = out.data.iter().map(|&q| out.params.dequantize(q as i32)).collect();
        Tensor::new(&[1, out.c * out.h * out.w], logits)
    }

    /// Integer convolution (a linear layer is a 1×1 conv over a 1×1 map).
    fn int_conv(&self, name: &str, a: &QAct, stride: usize, pad: usize, relu: bool, scratch: &mut Scratch) -> Result<QAct> {
        let k = self.kernel(name)?;
        let wshape = self.weights[name].data.shape();
        let (kh, kw) = if wshape.len() == 4 { (wshape[2], wshape[3]) } else { (1, 1) };
        let in_c = k.k / (kh * kw);
        let (c, h, w) = if wshape.len() == 4 { (a.c, a.h, a.w) } else { (a.c * a.h * a.w, 1, 1) };
        if c != in_c {
            return Err(Error::shape("quantized conv", format!("{name}: {c} input channels, weight expects {in_c}")));
        }
        let g = ops::conv_geom("quantized conv", &[1, c, h, w], &[k.out, c, kh, kw], stride, pad)?;
        let p = g.col_cols();
        let p_padded = p.div_ceil(kernels::PB) * kernels::PB;
        // Stale values in padding rows/columns only meet zero weights or
        // land in accumulator columns that are never read.
        if scratch.cols.len() < k.k_padded * p_padded {
            scratch.cols.resize(k.k_padded * p_padded, 0);
        }
        if scratch.acc.len() < k.out_padded * p_padded {
            scratch.acc.resize(k.out_padded * p_padded, 0);
        }
        kernels::im2col(&a.data, a.params.zero_point, &g, p_padded, &mut scratch.cols);
        kernels::gemm(&k.centered, &scratch.cols, k.out_padded, k.k_padded, p_padded, &mut scratch.acc);

        let wp = self.weights[name].params;
        let bias = self.quantized_bias(name, a.params.scale, wp.scale)?;
        let exact_scale = a.params.scale as f64 * wp.scale as f64;
        let acc = &scratch.acc;
        let params = self.site_params(name, || {
            let (mut lo, mut hi) = (i32::MAX, i32::MIN);
            for (o, &b) in bias.iter().enumerate() {
                for &v in &acc[o * p_padded..o * p_padded + p] {
                    lo = lo.min(v + b);
                    hi = hi.max(v + b);
                }
            }
            let (lo, hi) = ((lo as f64 * exact_scale) as f32, (hi as f64 * exact_scale) as f32);
            Some(if relu { Range { min: lo.max(0.0), max: hi.max(0.0) } } else { Range { min: lo, max: hi } })
        })?;
        // Same rounding as `QuantParams::quantize` applied to the real value
        // the simulated path produces, so both modes agree on every code.
        let (scale, offset, zp) = (params.scale, params.offset, params.zero_point as f32);
        let lo = if relu { params.zero_point } else { params.qmin } as f32;
        let hi = params.qmax as f32;
        let mut data = vec![0u8; k.out * p];
        for ((out, &b), row) in data.chunks_exact_mut(p).zip(&bias).zip(acc.chunks_exact(p_padded)) {
            for (o, &v) in out.iter_mut().zip(&row[..p]) {
                let real = ((v + b) as f64 * exact_scale) as f32;
                *o = (rint_small(((real - offset) / scale).clamp(-RINT_LIMIT, RINT_LIMIT)) + zp).clamp(lo, hi) as u8;
            }
        }
        Ok(QAct { data, c: k.out, h: g.oh, w: g.ow, params })
    }

    fn int_add(&self, name: &str, a: &QAct, b: &QAct, relu: bool) -> Result<QAct> {
        if (a.c, a.h, a.w) != (b.c, b.h, b.w) {
            return Err(Error::shape("quantized add", format!("{name}: operand shapes differ")));
        }
        let (za, zb) = (a.params.zero_point, b.params.zero_point);
        let real = |i: usize| a.params.scale * (a.data[i] as i32 - za) as f32 + b.params.scale * (b.data[i] as i32 - zb) as f32;
        let params = self.site_params(name, || {
            let mut r = Range::of(&(0..a.data.len()).map(real).collect::<Vec<_>>())?;
            if relu {
                r = Range { min: r.min.max(0.0), max: r.max.max(0.0) };
            }
            Some(r)
        })?;
        let floor = if relu { params.zero_point } else { params.qmin };
        let data = (0..a.data.len()).map(|i| params.quantize(real(i)).max(floor) as u8).collect();
        Ok(QAct { data, c: a.c, h: a.h, w: a.w, params })
    }
}

/// One sample's quantized activation.
#[derive(Clone, Debug)]
struct QAct {
    data: Vec<u8>,
    c: usize,
    h: usize,
    w: usize,
    params: QuantParams,
}

#[derive(Default)]
struct Scratch {
    cols: Vec<i16>,
    acc: Vec<i32>,
}

/// Max pooling directly on codes (dequantization is monotone). Padding
/// never wins.
fn int_maxpool(a: &QAct, kernel: usize, stride: usize, pad: usize) -> Result<QAct> {
    let (oh, ow) = match (ops::out_extent(a.h, kernel, stride, pad), ops::out_extent(a.w, kernel, stride, pad)) {
        (Some(oh), Some(ow)) if pad * 2 <= kernel => (oh, ow),
        _ => return Err(Error::shape("maxpool", format!("{}x{} input, kernel {kernel}, pad {pad}", a.h, a.w))),
    };
    let mut data = Vec::with_capacity(a.c * oh * ow);
    let mut colmax = vec![0u8; a.w];
    for plane in a.data.chunks_exact(a.h * a.w) {
        for oy in 0..oh {
            let y0 = (oy * stride).saturating_sub(pad);
            let y1 = (oy * stride + kernel - pad).min(a.h);
            colmax.copy_from_slice(&plane[y0 * a.w..(y0 + 1) * a.w]);
            for y in y0 + 1..y1 {
                for (m, &v) in colmax.iter_mut().zip(&plane[y * a.w..(y + 1) * a.w]) {
                    *m = (*m).max(v);
                }
            }
            for ox in 0..ow {
                let x0 = (ox * stride).saturating_sub(pad);
                let x1 = (ox * stride + kernel - pad).min(a.w);
                data.push(colmax[x0..x1].iter().copied().fold(0, u8::max));
            }
        }
    }
    Ok(QAct { data, c: a.c, h: oh, w: ow, params: a.params })
}

/// Mean of each plane, rounded back onto the input grid.
fn int_avgpool(a: &QAct) -> QAct {
    let hw = a.h * a.w;
    let zp = a.params.zero_point;
    let data = a
        .data
        .chunks_exact(hw)
        .map(|p| {
            let sum: i32 = p.iter().map(|&v| v as i32 - zp).sum();
            (rint(sum as f32 / hw as f32) as i32 + zp).clamp(a.params.qmin, a.params.qmax) as u8
        })
        .collect();
    QAct { data, c: a.c, h: 1, w: 1, params: a.params }
}

pub(crate) mod kernels {
    use crate::ops::ConvGeom;

    /// Output rows per register block.
    pub const OB: usize = 4;
    /// Pixels per register block.
    pub const PB: usize = 16;

    /// Unfolds one u8 sample into centred columns `cols[k·p_padded + p]`.
    /// Padding taps are 0; columns `p ≥ oh·ow` are left as they were.
    pub fn im2col(x: &[u8], zero_point: i32, g: &ConvGeom, p_padded: usize, cols: &mut [i16]) {
        let zx = zero_point as i16;
        let (s, pad) = (g.stride, g.pad);
        for ci in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let k = (ci * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[k * p_padded..k * p_padded + g.oh * g.ow];
                    // Output columns whose tap lands inside the row:
                    // pad ≤ ox·stride + kj < w + pad.
                    let lo = pad.saturating_sub(kj).div_ceil(s).min(g.ow);
                    let hi = (g.w + pad).saturating_sub(kj).div_ceil(s).clamp(lo, g.ow);
                    for (oy, out) in dst.chunks_exact_mut(g.ow).enumerate() {
                        let iy = (oy * s + ki) as isize - pad as isize;
                        if iy < 0 || iy >= g.h as isize || lo == hi {
                            out.fill(0);
                            continue;
                        }
                        let row = &x[(ci * g.h + iy as usize) * g.w..][..g.w];
                        let first = lo * s + kj - pad;
                        out[..lo].fill(0);
                        out[hi..].fill(0);
                        let out = &mut out[lo..hi];
                        if s == 1 {
                            for (o, &v) in out.iter_mut().zip(&row[first..]) {
                                *o = v as i16 - zx;
                            }
                        } else {
                            for (j, o) in out.iter_mut().enumerate() {
                                *o = row[first + j * s] as i16 - zx;
                            }
                        }
                    }
                }
            }
        }
    }

    /// `acc[o][p] = Σ_k w[o][k]·x[k][p]` with `w` `o_padded × k_padded`,
    /// `x` `k_padded × p_padded` and `acc` `o_padded × p_padded`, all
    /// row-major. Requires `OB | o_padded`, `2 | k_padded`, `PB | p_padded`.
    pub fn gemm(w: &[i16], x: &[i16], o_padded: usize, k_padded: usize, p_padded: usize, acc: &mut [i32]) {
        assert!(o_padded.is_multiple_of(OB) && k_padded.is_multiple_of(2) && p_padded.is_multiple_of(PB));
        assert!(w.len() >= o_padded * k_padded && x.len() >= k_padded * p_padded && acc.len() >= o_padded * p_padded);
        #[cfg(target_arch = "x86_64")]
        if has_avx2() {
            // SAFETY: AVX2 is available and the slice extents were checked above.
            unsafe { gemm_avx2(w, x, o_padded, k_padded, p_padded, acc) };
            return;
        }
        gemm_generic(w, x, o_padded, k_padded, p_padded, acc);
    }

    #[cfg(target_arch = "x86_64")]
    fn has_avx2() -> bool {
        #[cfg(feature = "std")]
        {
            std::is_x86_feature_detected!("avx2")
        }
        #[cfg(not(feature = "std"))]
        {
            cfg!(target_feature = "avx2")
        }
    }

    pub fn gemm_generic(w: &[i16], x: &[i16], o_padded: usize, k_padded: usize, p_padded: usize, acc: &mut [i32]) {
        for o in 0..o_padded {
            let out = &mut acc[o * p_padded..(o + 1) * p_padded];
            out.fill(0);
            for (k, &wk) in w[o * k_padded..(o + 1) * k_padded].iter().enumerate() {
                let wk = wk as i32;
                for (a, &v) in out.iter_mut().zip(&x[k * p_padded..(k + 1) * p_padded]) {
                    *a += v as i32 * wk;
                }
            }
        }
    }

    /// Pairs taps `2kk, 2kk+1` with `vpunpck*wd` so `vpmaddwd` consumes
    /// two taps per lane. Unpacking works within 128-bit halves, so the
    /// accumulators hold pixels {0-3, 8-11} and {4-7, 12-15} until the
    /// final lane permute.
    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2")]
    unsafe fn gemm_avx2(w: &[i16], x: &[i16], o_padded: usize, k_padded: usize, p_padded: usize, acc: &mut [i32]) {
        use core::arch::x86_64::*;
        let (wp, xp, ap) = (w.as_ptr(), x.as_ptr(), acc.as_mut_ptr());
        for ob in (0..o_padded).step_by(OB) {
            for pb in (0..p_padded).step_by(PB) {
                let mut c = [_mm256_setzero_si256(); 2 * OB];
                for kk in 0..k_padded / 2 {
                    let r0 = _mm256_loadu_si256(xp.add(2 * kk * p_padded + pb) as *const __m256i);
                    let r1 = _mm256_loadu_si256(xp.add((2 * kk + 1) * p_padded + pb) as *const __m256i);
                    let lo = _mm256_unpacklo_epi16(r0, r1);
                    let hi = _mm256_unpackhi_epi16(r0, r1);
                    for r in 0..OB {
                        let pair = (wp.add((ob + r) * k_padded + 2 * kk) as *const i32).read_unaligned();
                        let wv = _mm256_set1_epi32(pair);
                        c[2 * r] = _mm256_add_epi32(c[2 * r], _mm256_madd_epi16(lo, wv));
                        c[2 * r + 1] = _mm256_add_epi32(c[2 * r + 1], _mm256_madd_epi16(hi, wv));
                    }
                }
                for r in 0..OB {
                    let dst = ap.add((ob + r) * p_padded + pb);
                    let first = _mm256_permute2x128_si256::<0x20>(c[2 * r], c[2 * r + 1]);
                    let second = _mm256_permute2x128_si256::<0x31>(c[2 * r], c[2 * r + 1]);
                    _mm256_storeu_si256(dst as *mut __m256i, first);
                    _mm256_storeu_si256(dst.add(8) as *mut __m256i, second);
                }
            }
        }
    }
}

/// Folds, quantizes weights per tensor and installs activation parameters
/// from `stats`.
pub fn quantize_model(model: &Model, stats: &CalibrationStats, sites: ActivationSites) -> Result<QuantizedModel> {
    let folded = FoldedModel::fold(model)?;
    let mut activations = BTreeMap::new();
    for l in &folded.layers {
        if !l.op.is_site() {
            continue;
        }
        let keep = match sites {
            ActivationSites::All => true,
            ActivationSites::Boundary => matches!(l.op, QOp::Input | QOp::Linear),
        };
        let r = stats
            .sites
            .get(&l.name)
            .ok_or_else(|| Error::MissingTensor(format!("calibration statistics for site `{}`", l.name)))?;
        if keep {
            activations.insert(l.name.clone(), QuantParams::from_range_with_zero(r.min, r.max, DEFAULT_BITS)?);
        }
    }
    let mut weights = BTreeMap::new();
    for (name, w) in &folded.weights {
        let r = Range::of(w.data()).ok_or(Error::Empty("weight tensor"))?;
        let params = QuantParams::from_range_with_zero(r.min, r.max, DEFAULT_BITS)?;
        let data = w.map(|v| params.quantize(v) as u8);
        weights.insert(name.clone(), QTensor { data, params });
    }
    QuantizedModel::from_parts(folded.config, folded.layers, weights, folded.biases, activations, sites)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_range() {
        let x = Tensor::from_fn(&[256], |i| i as f32).unwrap();
        let (q, p) = quantize_tensor(&x, 0.0, 255.0, 8).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, 0));
        assert!(q.data().iter().enumerate().all(|(i, &v)| v as usize == i));
        assert_eq!(dequantize(&q, &p), x);
    }

    #[test]
    fn constant_range_round_trips() {
        let x = Tensor::full(&[5], -2.75f32).unwrap();
        let (q, p) = quantize_tensor(&x, -2.75, -2.75, 8).unwrap();
        assert_eq!((p.scale, p.zero_point), (1.0, p.qmin));
        assert!(q.data().iter().all(|&v| v as i32 == p.qmin));
        assert_eq!(dequantize(&q, &p), x);
    }

    #[test]
    fn zero_point_dequantizes_to_zero() {
        let p = QuantParams::from_range(-1.3, 2.9, 8).unwrap();
        assert_eq!(p.dequantize(p.zero_point), 0.0);
        assert_eq!(p.quantize(0.0), p.zero_point);
    }

    #[test]
    fn ties_round_to_even() {
        let p = QuantParams::from_range(0.0, 255.0, 8).unwrap();
        assert_eq!(p.quantize(2.5), 2);
        assert_eq!(p.quantize(3.5), 4);
    }

    #[test]
    fn bad_ranges_rejected() {
        assert!(QuantParams::from_range(1.0, 0.0, 8).is_err());
        assert!(QuantParams::from_range(0.0, f32::NAN, 8).is_err());
        assert!(QuantParams::from_range(0.0, 1.0, 9).is_err());
    }

    #[test]
    fn int_gemm_matches_naive() {
        let (o, k, p) = (8usize, 6usize, 32usize);
        let w: Vec<i16> = (0..o * k).map(|i| ((i * 37) % 511) as i16 - 255).collect();
        let xs: Vec<i16> = (0..k * p).map(|i| ((i * 101) % 511) as i16 - 255).collect();
        let mut acc = vec![0i32; o * p];
        kernels::gemm(&w, &xs, o, k, p, &mut acc);
        let mut generic = vec![0i32; o * p];
        kernels::gemm_generic(&w, &xs, o, k, p, &mut generic);
        for oo in 0..o {
            for pp in 0..p {
                let e: i32 = (0..k).map(|kk| w[oo * k + kk] as i32 * xs[kk * p + pp] as i32).sum();
                assert_eq!(acc[oo * p + pp], e);
                assert_eq!(generic[oo * p + pp], e);
            }
        }
    }

    #[test]
    fn rint_matches_libm() {
        let mut v = vec![0.5f32, 1.5, 2.5, -0.5, -1.5, -2.5, -0.0, 0.49999997, 4194304.5, -4194304.5, 8388607.5, 1e10, -1e10];
        v.extend((0..20000).map(|i| (i as f32 - 10000.0) * 0.25 + 0.001 * (i % 3) as f32));
        for x in v {
            assert_eq!(rint(x).to_bits(), libm::rintf(x).to_bits(), "{x}");
        }
        assert!(rint(f32::NAN).is_nan());
    }
}
