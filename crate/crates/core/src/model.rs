//! Residual classification networks built from basic blocks.
//!
//! A model is a flat list of [`LayerSpec`]s forming a DAG (each layer names
//! the indices of its inputs) plus named parameter and buffer tensors.
//! Parameter naming follows `<layer>.<field>`:
//!
//! | layer kind | parameters                  | buffers                              |
//! |------------|-----------------------------|--------------------------------------|
//! | conv       | `weight` (O×I×K×K)          |                                      |
//! | batchnorm  | `gamma`, `beta` (C)         | `running_mean`, `running_var` (C)    |
//! | linear     | `weight` (G×F), `bias` (G)  |                                      |

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{self, BnStats, BN_EPS};
use crate::prune::PruneMask;
use crate::tensor::{Scalar, Tensor};

pub const PRESET_FULL: &str = "resnet18-full";
pub const PRESET_DESK: &str = "resnet-desk";

/// Name of the classification head layer.
pub const HEAD: &str = "fc";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StemConfig {
    pub kernel: usize,
    pub stride: usize,
    pub channels: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Side of the square input image in pixels.
    pub input_size: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub stem: StemConfig,
    pub block_counts: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub num_classes: usize,
}

fn default_in_channels() -> usize {
    3
}

impl ModelConfig {
    /// The 18-layer network at 224×224.
    pub fn resnet18_full(num_classes: usize) -> Self {
        ModelConfig {
            input_size: 224,
            in_channels: 3,
            stem: StemConfig { kernel: 7, stride: 2, channels: 64 },
            block_counts: vec![2, 2, 2, 2],
            stage_channels: vec![64, 128, 256, 512],
            num_classes,
        }
    }

    /// Reduced network at 64×64 for CPU-scale experiments.
    pub fn resnet_desk(num_classes: usize) -> Self {
        ModelConfig {
            input_size: 64,
            in_channels: 3,
            stem: StemConfig { kernel: 3, stride: 1, channels: 16 },
            block_counts: vec![1, 1, 1, 1],
            stage_channels: vec![16, 32, 64, 128],
            num_classes,
        }
    }

    pub fn preset(name: &str, num_classes: usize) -> Option<Self> {
        match name {
            PRESET_FULL => Some(Self::resnet18_full(num_classes)),
            PRESET_DESK => Some(Self::resnet_desk(num_classes)),
            _ => None,
        }
    }

    /// Weighted layers on the main path: stem conv, two convs per block,
    /// and the classifier. Projection shortcuts are not counted.
    pub fn layer_count(&self) -> usize {
        2 + 2 * self.block_counts.iter().sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_counts.is_empty() || self.block_counts.len() != self.stage_channels.len() {
            return Err(Error::invalid(format!(
                "inconsistent channel progression: {} stages of blocks vs {} stage widths",
                self.block_counts.len(),
                self.stage_channels.len()
            )));
        }
        if self.block_counts.contains(&0) || self.stage_channels.contains(&0) {
            return Err(Error::invalid("inconsistent channel progression: empty stage"));
        }
        if self.stem.channels == 0 || self.stem.kernel == 0 || self.stem.stride == 0 {
            return Err(Error::invalid("stem kernel, stride and channels must be positive"));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.input_size == 0 {
            return Err(Error::invalid("input channels, input size and class count must be positive"));
        }
        let layers = build_layers(self);
        infer_shapes(&layers, self.in_channels, self.input_size)?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Input,
    Conv,
    #[serde(rename = "bn")]
    BatchNorm,
    Relu,
    MaxPool,
    AvgPool,
    Linear,
    Add,
}

/// One node of the layer graph. Channel, kernel, stride and padding fields
/// are meaningful for the kinds that use them and zero otherwise.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl LayerSpec {
    pub fn param(&self, field: &str) -> String {
        format!("{}.{field}", self.name)
    }

    /// Shape of the weight tensor of a conv or linear layer.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Conv => Some(vec![self.out_channels, self.in_channels, self.kernel, self.kernel]),
            LayerKind::Linear => Some(vec![self.out_channels, self.in_channels]),
            _ => None,
        }
    }
}

struct GraphBuilder {
    layers: Vec<LayerSpec>,
}

impl GraphBuilder {
    #[allow(clippy::too_many_arguments)]
    fn push(&mut self, name: String, kind: LayerKind, inputs: Vec<usize>, cin: usize, cout: usize, k: usize, s: usize, p: usize) -> usize {
        self.layers.push(LayerSpec {
            name,
            kind,
            inputs,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            stride: s,
            padding: p,
        });
        self.layers.len() - 1
    }

    fn conv(&mut self, name: String, x: usize, cin: usize, cout: usize, k: usize, s: usize) -> usize {
        self.push(name, LayerKind::Conv, vec![x], cin, cout, k, s, k / 2)
    }

    fn bn(&mut self, name: String, x: usize, c: usize) -> usize {
        self.push(name, LayerKind::BatchNorm, vec![x], c, c, 0, 0, 0)
    }

    fn relu(&mut self, name: String, x: usize, c: usize) -> usize {
        self.push(name, LayerKind::Relu, vec![x], c, c, 0, 0, 0)
    }
}

/// Expands a configuration into its layer graph.
pub fn build_layers(config: &ModelConfig) -> Vec<LayerSpec> {
    let mut g = GraphBuilder { layers: Vec::new() };
    let input = g.push("input".into(), LayerKind::Input, vec![], 0, config.in_channels, 0, 0, 0);
    let c0 = config.stem.channels;
    let mut x = g.conv("conv1".into(), input, config.in_channels, c0, config.stem.kernel, config.stem.stride);
    x = g.bn("bn1".into(), x, c0);
    x = g.relu("relu".into(), x, c0);
    x = g.push("maxpool".into(), LayerKind::MaxPool, vec![x], c0, c0, 3, 2, 1);
    let mut cin = c0;
    for (si, (&blocks, &cout)) in config.block_counts.iter().zip(&config.stage_channels).enumerate() {
        for b in 0..blocks {
            let stride = if si > 0 && b == 0 { 2 } else { 1 };
            let p = format!("layer{}.{b}", si + 1);
            let block_in = x;
            let mut y = g.conv(format!("{p}.conv1"), block_in, cin, cout, 3, stride);
            y = g.bn(format!("{p}.bn1"), y, cout);
            y = g.relu(format!("{p}.relu1"), y, cout);
            y = g.conv(format!("{p}.conv2"), y, cout, cout, 3, 1);
            y = g.bn(format!("{p}.bn2"), y, cout);
            let shortcut = if stride != 1 || cin != cout {
                let s = g.conv(format!("{p}.shortcut.conv"), block_in, cin, cout, 1, stride);
                g.bn(format!("{p}.shortcut.bn"), s, cout)
            } else {
                block_in
            };
            let sum = g.push(format!("{p}.add"), LayerKind::Add, vec![y, shortcut], cout, cout, 0, 0, 0);
            x = g.relu(format!("{p}.relu2"), sum, cout);
            cin = cout;
        }
    }
    x = g.push("avgpool".into(), LayerKind::AvgPool, vec![x], cin, cin, 0, 0, 0);
    g.push(HEAD.into(), LayerKind::Linear, vec![x], cin, config.num_classes, 0, 0, 0);
    g.layers
}

/// Output `(channels, height, width)` of every layer; linear and pooled
/// outputs report a 1×1 spatial extent.
pub fn infer_shapes(layers: &[LayerSpec], in_channels: usize, input_size: usize) -> Result<Vec<(usize, usize, usize)>> {
    let mut shapes: Vec<(usize, usize, usize)> = Vec::with_capacity(layers.len());
    for l in layers {
        let src = |i: usize| shapes[l.inputs[i]];
        let shape = match l.kind {
            LayerKind::Input => (in_channels, input_size, input_size),
            LayerKind::Conv | LayerKind::MaxPool => {
                let (c, h, w) = src(0);
                if l.kind == LayerKind::Conv && c != l.in_channels {
                    return Err(Error::shape("infer_shapes", format!("{}: {c} channels in, expects {}", l.name, l.in_channels)));
                }
                let oh = ops::out_extent(h, l.kernel, l.stride, l.padding);
                let ow = ops::out_extent(w, l.kernel, l.stride, l.padding);
                match (oh, ow) {
                    (Some(oh), Some(ow)) => (if l.kind == LayerKind::Conv { l.out_channels } else { c }, oh, ow),
                    _ => return Err(Error::invalid(format!("{}: spatial size collapses at {h}x{w}", l.name))),
                }
            }
            LayerKind::BatchNorm | LayerKind::Relu => src(0),
            LayerKind::AvgPool => (src(0).0, 1, 1),
            LayerKind::Linear => {
                let (c, _, _) = src(0);
                if c != l.in_channels {
                    return Err(Error::shape("infer_shapes", format!("{}: {c} features in, expects {}", l.name, l.in_channels)));
                }
                (l.out_channels, 1, 1)
            }
            LayerKind::Add => {
                let (a, b) = (src(0), src(1));
                if a != b {
                    return Err(Error::shape("infer_shapes", format!("{}: {a:?} + {b:?}", l.name)));
                }
                a
            }
        };
        shapes.push(shape);
    }
    Ok(shapes)
}

/// Interpreter callbacks for [`run_graph`].
pub trait Backend {
    type Value: Clone;
    fn conv(&mut self, layer: &LayerSpec, x: &Self::Value) -> Result<Self::Value>;
    fn batchnorm(&mut self, layer: &LayerSpec, x: &Self::Value) -> Result<Self::Value>;
    fn relu(&mut self, layer: &LayerSpec, x: &Self::Value) -> Result<Self::Value>;
    fn maxpool(&mut self, layer: &LayerSpec, x: &Self::Value) -> Result<Self::Value>;
    fn avgpool(&mut self, layer: &LayerSpec, x: &Self::Value) -> Result<Self::Value>;
    fn linear(&mut self, layer: &LayerSpec, x: &Self::Value) -> Result<Self::Value>;
    fn add(&mut self, layer: &LayerSpec, a: &Self::Value, b: &Self::Value) -> Result<Self::Value>;
}

/// Evaluates the layer graph in order, releasing each intermediate after its
/// last consumer. Returns the value of the final layer.
pub fn run_graph<B: Backend>(layers: &[LayerSpec], backend: &mut B, input: B::Value) -> Result<B::Value> {
    let mut last_use = vec![0usize; layers.len()];
    for (i, l) in layers.iter().enumerate() {
        for &j in &l.inputs {
            last_use[j] = i;
        }
    }
    let mut values: Vec<Option<B::Value>> = vec![None; layers.len()];
    let mut input = Some(input);
    for (i, l) in layers.iter().enumerate() {
        let arg = |k: usize| -> Result<&B::Value> {
            let j = *l.inputs.get(k).ok_or_else(|| Error::invalid(format!("{} is missing input {k}", l.name)))?;
            values[j].as_ref().ok_or_else(|| Error::invalid(format!("{} reads a released value", l.name)))
        };
        let out = match l.kind {
            LayerKind::Input => input.take().ok_or_else(|| Error::invalid("graph has two inputs"))?,
            LayerKind::Conv => backend.conv(l, arg(0)?)?,
            LayerKind::BatchNorm => backend.batchnorm(l, arg(0)?)?,
            LayerKind::Relu => backend.relu(l, arg(0)?)?,
            LayerKind::MaxPool => backend.maxpool(l, arg(0)?)?,
            LayerKind::AvgPool => backend.avgpool(l, arg(0)?)?,
            LayerKind::Linear => backend.linear(l, arg(0)?)?,
            LayerKind::Add => {
                let (a, b) = (arg(0)?, arg(1)?);
                backend.add(l, a, b)?
            }
        };
        values[i] = Some(out);
        for &j in &l.inputs {
            if last_use[j] == i {
                values[j] = None;
            }
        }
    }
    values.pop().flatten().ok_or(Error::Empty("layer graph"))
}

fn get<'a, T>(map: &'a BTreeMap<String, Tensor<T>>, name: &str) -> Result<&'a Tensor<T>> {
    map.get(name).ok_or_else(|| Error::MissingTensor(name.to_string()))
}

/// Eager inference with batch norm in evaluation mode.
pub struct EvalBackend<'a, T> {
    pub params: &'a BTreeMap<String, Tensor<T>>,
    pub buffers: &'a BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Backend for EvalBackend<'_, T> {
    type Value = Tensor<T>;

    fn conv(&mut self, l: &LayerSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::conv2d(x, get(self.params, &l.param("weight"))?, None, l.stride, l.padding)
    }

    fn batchnorm(&mut self, l: &LayerSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::batchnorm_eval(
            x,
            get(self.params, &l.param("gamma"))?,
            get(self.params, &l.param("beta"))?,
            get(self.buffers, &l.param("running_mean"))?,
            get(self.buffers, &l.param("running_var"))?,
            BN_EPS,
        )
    }

    fn relu(&mut self, _: &LayerSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::relu(x))
    }

    fn maxpool(&mut self, l: &LayerSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(ops::maxpool2d(x, l.kernel, l.stride, l.padding)?.0)
    }

    fn avgpool(&mut self, _: &LayerSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::global_avgpool(x)
    }

    fn linear(&mut self, l: &LayerSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
        ops::linear(x, get(self.params, &l.param("weight"))?, Some(get(self.params, &l.param("bias"))?))
    }

    fn add(&mut self, _: &LayerSpec, a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
        ops::add(a, b)
    }
}

/// Records the forward pass on a tape for differentiation.
pub struct TapeBackend<'a, T> {
    pub tape: &'a mut Tape<T>,
    params: &'a BTreeMap<String, Tensor<T>>,
    buffers: &'a BTreeMap<String, Tensor<T>>,
    vars: BTreeMap<String, Var>,
    train_bn: bool,
    /// Batch statistics observed per batch-norm layer in training mode.
    pub bn_stats: Vec<(String, BnStats<T>)>,
}

impl<'a, T: Scalar> TapeBackend<'a, T> {
    pub fn new(
        tape: &'a mut Tape<T>,
        params: &'a BTreeMap<String, Tensor<T>>,
        buffers: &'a BTreeMap<String, Tensor<T>>,
        train_bn: bool,
    ) -> Self {
        TapeBackend { tape, params, buffers, vars: BTreeMap::new(), train_bn, bn_stats: Vec::new() }
    }

    fn var(&mut self, name: String) -> Result<Var> {
        if let Some(v) = self.vars.get(&name) {
            return Ok(*v);
        }
        let t = get(self.params, &name)?.clone();
        let v = self.tape.param(name.clone(), t);
        self.vars.insert(name, v);
        Ok(v)
    }
}

impl<T: Scalar> Backend for TapeBackend<'_, T> {
    type Value = Var;

    fn conv(&mut self, l: &LayerSpec, x: &Var) -> Result<Var> {
        let w = self.var(l.param("weight"))?;
        self.tape.conv2d(*x, w, None, l.stride, l.padding)
    }

    fn batchnorm(&mut self, l: &LayerSpec, x: &Var) -> Result<Var> {
        let g = self.var(l.param("gamma"))?;
        let b = self.var(l.param("beta"))?;
        let mode = if self.train_bn {
            BnMode::Train
        } else {
            BnMode::Eval {
                mean: get(self.buffers, &l.param("running_mean"))?,
                var: get(self.buffers, &l.param("running_var"))?,
            }
        };
        let (y, stats) = self.tape.batchnorm(*x, g, b, mode, BN_EPS)?;
        if let Some(s) = stats {
            self.bn_stats.push((l.name.clone(), s));
        }
        Ok(y)
    }

    fn relu(&mut self, _: &LayerSpec, x: &Var) -> Result<Var> {
        self.tape.relu(*x)
    }

    fn maxpool(&mut self, l: &LayerSpec, x: &Var) -> Result<Var> {
        self.tape.maxpool2d(*x, l.kernel, l.stride, l.padding)
    }

    fn avgpool(&mut self, _: &LayerSpec, x: &Var) -> Result<Var> {
        self.tape.global_avgpool(*x)
    }

    fn linear(&mut self, l: &LayerSpec, x: &Var) -> Result<Var> {
        let w = self.var(l.param("weight"))?;
        let b = self.var(l.param("bias"))?;
        self.tape.linear(*x, w, Some(b))
    }

    fn add(&mut self, _: &LayerSpec, a: &Var, b: &Var) -> Result<Var> {
        self.tape.add(*a, *b)
    }
}

/// Per-layer and total stored parameter counts (running statistics excluded).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: u64,
    pub per_layer: BTreeMap<String, u64>,
}

/// Summary of one residual block, as found by a structural scan.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub convs: usize,
    pub batchnorms: usize,
    pub has_add: bool,
    pub has_projection: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    layers: Vec<LayerSpec>,
    pub params: BTreeMap<String, Tensor<f32>>,
    pub buffers: BTreeMap<String, Tensor<f32>>,
    pub masks: Option<PruneMask>,
}

fn kaiming(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, gain: f64) -> Result<Tensor<f32>> {
    let std = gain / libm::sqrt(fan_in as f64);
    let dist = Normal::new(0.0f64, std).map_err(|e| Error::invalid(format!("{e}")))?;
    Tensor::from_fn(shape, |_| dist.sample(rng) as f32)
}

fn init_linear(rng: &mut ChaCha8Rng, l: &LayerSpec) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let w = kaiming(rng, &[l.out_channels, l.in_channels], l.in_channels, 1.0)?;
    Ok((w, Tensor::zeros(&[l.out_channels])?))
}

impl Model {
    /// Builds a model with seeded fan-in normal initialisation for conv and
    /// linear weights, unit gamma and zero beta for batch norm.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let layers = build_layers(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        for l in &layers {
            match l.kind {
                LayerKind::Conv => {
                    let fan_in = l.in_channels * l.kernel * l.kernel;
                    let shape = l.weight_shape().unwrap_or_default();
                    params.insert(l.param("weight"), kaiming(&mut rng, &shape, fan_in, core::f64::consts::SQRT_2)?);
                }
                LayerKind::BatchNorm => {
                    let c = l.out_channels;
                    params.insert(l.param("gamma"), Tensor::full(&[c], 1.0)?);
                    params.insert(l.param("beta"), Tensor::zeros(&[c])?);
                    buffers.insert(l.param("running_mean"), Tensor::zeros(&[c])?);
                    buffers.insert(l.param("running_var"), Tensor::full(&[c], 1.0)?);
                }
                LayerKind::Linear => {
                    let (w, b) = init_linear(&mut rng, l)?;
                    params.insert(l.param("weight"), w);
                    params.insert(l.param("bias"), b);
                }
                _ => {}
            }
        }
        Ok(Model { config, layers, params, buffers, masks: None })
    }

    /// Reassembles a model from stored tensors, checking that every tensor
    /// the configuration requires is present with the right shape.
    pub fn from_parts(
        config: ModelConfig,
        params: BTreeMap<String, Tensor<f32>>,
        buffers: BTreeMap<String, Tensor<f32>>,
        masks: Option<PruneMask>,
    ) -> Result<Model> {
        config.validate()?;
        let layers = build_layers(&config);
        let model = Model { config, layers, params, buffers, masks };
        for (name, shape, is_param) in model.expected_tensors() {
            let map = if is_param { &model.params } else { &model.buffers };
            let t = get(map, &name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape("from_parts", format!("{name}: {:?}, expected {shape:?}", t.shape())));
            }
        }
        let expected = model.expected_tensors().len();
        if model.params.len() + model.buffers.len() != expected {
            return Err(Error::Integrity(format!(
                "{} stored tensors, configuration defines {expected}",
                model.params.len() + model.buffers.len()
            )));
        }
        if let Some(m) = &model.masks {
            m.check_against(&model.params)?;
        }
        Ok(model)
    }

    /// `(name, shape, is_parameter)` of every tensor the layers require.
    pub fn expected_tensors(&self) -> Vec<(String, Vec<usize>, bool)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv => out.push((l.param("weight"), l.weight_shape().unwrap_or_default(), true)),
                LayerKind::BatchNorm => {
                    for f in ["gamma", "beta"] {
                        out.push((l.param(f), vec![l.out_channels], true));
                    }
                    for f in ["running_mean", "running_var"] {
                        out.push((l.param(f), vec![l.out_channels], false));
                    }
                }
                LayerKind::Linear => {
                    out.push((l.param("weight"), l.weight_shape().unwrap_or_default(), true));
                    out.push((l.param("bias"), vec![l.out_channels], true));
                }
                _ => {}
            }
        }
        out
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn head(&self) -> Option<&LayerSpec> {
        self.layers.iter().rev().find(|l| l.kind == LayerKind::Linear)
    }

    fn check_input(&self, batch_shape: &[usize]) -> Result<()> {
        let s = self.config.input_size;
        match *batch_shape {
            [_, c, h, w] if c == self.config.in_channels && h == s && w == s => Ok(()),
            _ => Err(Error::shape(
                "forward",
                format!("batch {batch_shape:?} does not match N×{}×{s}×{s}", self.config.in_channels),
            )),
        }
    }

    /// Inference forward pass returning N×classes logits.
    pub fn forward(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_input(batch.shape())?;
        let mut be = EvalBackend { params: &self.params, buffers: &self.buffers };
        run_graph(&self.layers, &mut be, batch.clone())
    }

    /// Forward pass in any float type, over the given weights.
    pub fn forward_with<T: Scalar>(
        &self,
        params: &BTreeMap<String, Tensor<T>>,
        buffers: &BTreeMap<String, Tensor<T>>,
        batch: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.check_input(batch.shape())?;
        let mut be = EvalBackend { params, buffers };
        run_graph(&self.layers, &mut be, batch.clone())
    }

    /// Records a forward pass on `tape`; returns the logits variable and the
    /// per-layer batch statistics when batch norm runs in training mode.
    pub fn forward_on_tape<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &BTreeMap<String, Tensor<T>>,
        buffers: &BTreeMap<String, Tensor<T>>,
        batch: Tensor<T>,
        train_bn: bool,
    ) -> Result<(Var, Vec<(String, BnStats<T>)>)> {
        self.check_input(batch.shape())?;
        let mut be = TapeBackend::new(tape, params, buffers, train_bn);
        let x = be.tape.leaf(batch, false);
        let logits = run_graph(&self.layers, &mut be, x)?;
        Ok((logits, be.bn_stats))
    }

    pub fn count_parameters(&self) -> ParamCount {
        let mut per_layer = BTreeMap::new();
        for (name, t) in &self.params {
            let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l);
            *per_layer.entry(layer.to_string()).or_insert(0u64) += t.len() as u64;
        }
        ParamCount { total: per_layer.values().sum(), per_layer }
    }

    /// Multiply-accumulate count of one forward pass at `input_size`: convs,
    /// the classifier, and one operation per element of each skip addition.
    pub fn count_flops(&self, input_size: usize) -> Result<u64> {
        count_flops(&self.layers, self.config.in_channels, input_size)
    }

    /// Structural scan of residual blocks.
    pub fn basic_blocks(&self) -> Vec<BlockInfo> {
        let mut out: Vec<BlockInfo> = Vec::new();
        for l in &self.layers {
            let Some(prefix) = l.name.strip_prefix("layer").and_then(|_| {
                let mut parts = l.name.splitn(3, '.');
                let (a, b) = (parts.next()?, parts.next()?);
                Some(format!("{a}.{b}"))
            }) else {
                continue;
            };
            if out.last().is_none_or(|b| b.prefix != prefix) {
                out.push(BlockInfo {
                    prefix: prefix.clone(),
                    in_channels: 0,
                    out_channels: 0,
                    stride: 1,
                    convs: 0,
                    batchnorms: 0,
                    has_add: false,
                    has_projection: false,
                });
            }
            let b = out.last_mut().expect("pushed above");
            let rest = &l.name[prefix.len() + 1..];
            match l.kind {
                LayerKind::Conv if rest.starts_with("shortcut") => b.has_projection = true,
                LayerKind::Conv => {
                    if b.convs == 0 {
                        b.in_channels = l.in_channels;
                        b.stride = l.stride;
                    }
                    b.out_channels = l.out_channels;
                    b.convs += 1;
                }
                LayerKind::BatchNorm if !rest.starts_with("shortcut") => b.batchnorms += 1,
                LayerKind::Add => b.has_add = true,
                _ => {}
            }
        }
        out
    }

    /// Replaces the classifier with a freshly initialised one for
    /// `num_classes` outputs. All other tensors are left untouched.
    pub fn replace_head(&self, num_classes: usize, seed: u64) -> Result<Model> {
        if num_classes == 0 {
            return Err(Error::invalid("class count must be positive"));
        }
        let head_idx = self
            .layers
            .iter()
            .rposition(|l| l.kind == LayerKind::Linear)
            .ok_or_else(|| Error::invalid("model has no linear head"))?;
        let mut out = self.clone();
        out.config.num_classes = num_classes;
        out.layers[head_idx].out_channels = num_classes;
        let head = out.layers[head_idx].clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, b) = init_linear(&mut rng, &head)?;
        out.params.insert(head.param("weight"), w);
        out.params.insert(head.param("bias"), b);
        if let Some(m) = &mut out.masks {
            m.masks.remove(&head.param("weight"));
            m.masks.remove(&head.param("bias"));
        }
        Ok(out)
    }

    /// Copies tensors from an external archive, translating names with
    /// `mapping`. The classifier is skipped when its shape differs; any other
    /// shape mismatch is an error naming the tensor.
    pub fn import_weights(
        &self,
        archive: &BTreeMap<String, Tensor<f32>>,
        mapping: &NameMapping,
    ) -> Result<(Model, ImportReport)> {
        let mut out = self.clone();
        let mut report = ImportReport::default();
        let in_head = |internal: &str| {
            self.head()
                .is_some_and(|h| internal.strip_prefix(h.name.as_str()).is_some_and(|r| r.starts_with('.')))
        };
        // The classifier is taken or skipped as a unit.
        let skip_head = archive.iter().any(|(ext, t)| {
            let internal = mapping.translate(ext);
            in_head(&internal) && self.params.get(&internal).is_some_and(|p| p.shape() != t.shape())
        });
        for (ext, t) in archive {
            let internal = mapping.translate(ext);
            if skip_head && in_head(&internal) {
                report.skipped.push(SkippedTensor { name: ext.clone(), reason: "classifier shape differs".into() });
                continue;
            }
            let slot = if out.params.contains_key(&internal) {
                out.params.get_mut(&internal)
            } else {
                out.buffers.get_mut(&internal)
            };
            let Some(slot) = slot else {
                report.skipped.push(SkippedTensor { name: ext.clone(), reason: "no matching tensor".into() });
                continue;
            };
            if slot.shape() != t.shape() {
                return Err(Error::shape(
                    "import_weights",
                    format!("tensor `{ext}` (as `{internal}`) has shape {:?}, model expects {:?}", t.shape(), slot.shape()),
                ));
            }
            *slot = t.clone();
            report.loaded.push(internal);
        }
        Ok((out, report))
    }
}

/// Multiply-accumulate count of a layer graph.
pub fn count_flops(layers: &[LayerSpec], in_channels: usize, input_size: usize) -> Result<u64> {
    let shapes = infer_shapes(layers, in_channels, input_size)?;
    let mut total = 0u64;
    for (l, &(c, h, w)) in layers.iter().zip(&shapes) {
        total += match l.kind {
            LayerKind::Conv => (c * h * w * l.in_channels * l.kernel * l.kernel) as u64,
            LayerKind::Linear => (l.in_channels * l.out_channels) as u64,
            LayerKind::Add => (c * h * w) as u64,
            _ => 0,
        };
    }
    Ok(total)
}

/// Suffix-rewrite rules translating external parameter names to internal
/// ones. The first matching rule wins; unmatched names pass through.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NameMapping {
    #[serde(default)]
    pub description: String,
    pub rules: Vec<SuffixRule>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuffixRule {
    pub external: String,
    pub internal: String,
}

impl NameMapping {
    pub fn translate(&self, name: &str) -> String {
        for r in &self.rules {
            if let Some(stem) = name.strip_suffix(r.external.as_str()) {
                if stem.is_empty() || stem.ends_with('.') {
                    return format!("{stem}{}", r.internal);
                }
            }
        }
        name.to_string()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedTensor {
    pub name: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImportReport {
    pub loaded: Vec<String>,
    pub skipped: Vec<SkippedTensor>,
}
