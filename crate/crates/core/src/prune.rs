//! L1 unstructured magnitude pruning with quantile thresholds.
//!
//! A weight θ is removed when `|θ| < τ`, where τ is the `retain_quantile`
//! quantile of the magnitudes in its population (all targets for global
//! scope, one tensor for per-layer scope). Weights equal to τ survive.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerKind, Model};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneScope {
    #[default]
    Global,
    PerLayer,
}

/// Which parameter tensors are eligible for pruning.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneTargets {
    /// Weights of every conv and linear layer; never biases or batch norm.
    #[default]
    ConvAndLinearWeights,
    Names(Vec<String>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub retain_quantile: f64,
    pub scope: PruneScope,
    pub targets: PruneTargets,
}

impl Default for PruneConfig {
    fn default() -> Self {
        PruneConfig { retain_quantile: 0.67, scope: PruneScope::Global, targets: PruneTargets::default() }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.retain_quantile) {
            return Err(Error::invalid(format!("retain_quantile {} outside [0, 1)", self.retain_quantile)));
        }
        Ok(())
    }
}

/// Pruning threshold(s) actually used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Thresholds {
    Global(f32),
    PerLayer(BTreeMap<String, f32>),
}

impl Thresholds {
    pub fn for_tensor(&self, name: &str) -> Option<f32> {
        match self {
            Thresholds::Global(t) => Some(*t),
            Thresholds::PerLayer(m) => m.get(name).copied(),
        }
    }
}

/// Binary survivor masks (1 = kept) for each pruned tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct PruneMask {
    pub masks: BTreeMap<String, Tensor<u8>>,
    pub thresholds: Thresholds,
}

impl PruneMask {
    /// Checks that every mask names an existing parameter of the same shape
    /// and holds only 0/1.
    pub fn check_against(&self, params: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        for (name, m) in &self.masks {
            let p = params.get(name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
            if p.shape() != m.shape() {
                return Err(Error::shape("mask", format!("{name}: mask {:?} vs tensor {:?}", m.shape(), p.shape())));
            }
            if m.data().iter().any(|&b| b > 1) {
                return Err(Error::Integrity(format!("mask `{name}` holds values other than 0/1")));
            }
        }
        Ok(())
    }

    /// Zeroes masked positions in a name → tensor map (weights or gradients).
    pub fn apply(&self, tensors: &mut BTreeMap<String, Tensor<f32>>) {
        for (name, m) in &self.masks {
            if let Some(t) = tensors.get_mut(name) {
                for (v, &keep) in t.data_mut().iter_mut().zip(m.data()) {
                    if keep == 0 {
                        *v = 0.0;
                    }
                }
            }
        }
    }

    pub fn pruned_count(&self) -> u64 {
        self.masks.values().map(|m| m.data().iter().filter(|&&b| b == 0).count() as u64).sum()
    }
}

/// Names of the tensors selected by `targets`.
pub fn target_names(model: &Model, targets: &PruneTargets) -> Vec<String> {
    match targets {
        PruneTargets::ConvAndLinearWeights => model
            .layers()
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv | LayerKind::Linear))
            .map(|l| l.param("weight"))
            .collect(),
        PruneTargets::Names(names) => names.clone(),
    }
}

/// `q`-quantile of `values` with linear interpolation between order
/// statistics (`values` is reordered).
pub fn quantile(values: &mut [f32], q: f64) -> Result<f32> {
    if values.is_empty() {
        return Err(Error::Empty("quantile population"));
    }
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::invalid(format!("quantile {q} outside [0, 1]")));
    }
    let pos = q * (values.len() - 1) as f64;
    let lo = libm::floor(pos) as usize;
    let frac = pos - lo as f64;
    let (_, &mut lo_v, rest) = values.select_nth_unstable_by(lo, f32::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return Ok(lo_v);
    }
    let hi_v = rest.iter().copied().fold(f32::INFINITY, f32::min);
    Ok((lo_v as f64 + frac * (hi_v as f64 - lo_v as f64)) as f32)
}

fn magnitudes(t: &Tensor<f32>) -> impl Iterator<Item = f32> + '_ {
    t.data().iter().map(|v| v.abs())
}

pub fn compute_threshold(model: &Model, config: &PruneConfig) -> Result<Thresholds> {
    config.validate()?;
    let names = target_names(model, &config.targets);
    if names.is_empty() {
        return Err(Error::Empty("prune target set"));
    }
    let tensors = names
        .iter()
        .map(|n| model.params.get(n).map(|t| (n, t)).ok_or_else(|| Error::MissingTensor(n.clone())))
        .collect::<Result<Vec<_>>>()?;
    match config.scope {
        PruneScope::Global => {
            let mut all: Vec<f32> = tensors.iter().flat_map(|(_, t)| magnitudes(t)).collect();
            Ok(Thresholds::Global(quantile(&mut all, config.retain_quantile)?))
        }
        PruneScope::PerLayer => {
            let mut out = BTreeMap::new();
            for (n, t) in tensors {
                let mut mags: Vec<f32> = magnitudes(t).collect();
                out.insert(n.clone(), quantile(&mut mags, config.retain_quantile)?);
            }
            Ok(Thresholds::PerLayer(out))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSparsity {
    pub name: String,
    pub total: u64,
    pub nonzero: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub total: u64,
    pub nonzero: u64,
    pub reduction_percent: f64,
    pub per_layer: Vec<LayerSparsity>,
    /// Loss on a fixed reference batch before pruning, when measured.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_after: Option<f64>,
}

impl SparsityReport {
    pub fn to_table(&self) -> String {
        let width = self.per_layer.iter().map(|l| l.name.len()).max().unwrap_or(5).max(5);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>12}  {:>12}  {:>8}", "layer", "total", "nonzero", "sparsity");
        for l in &self.per_layer {
            let sp = if l.total == 0 { 0.0 } else { 100.0 * (1.0 - l.nonzero as f64 / l.total as f64) };
            let _ = writeln!(s, "{:<width$}  {:>12}  {:>12}  {:>7.2}%", l.name, l.total, l.nonzero, sp);
        }
        let _ = writeln!(
            s,
            "{:<width$}  {:>12}  {:>12}  {:>7.2}%",
            "TOTAL", self.total, self.nonzero, self.reduction_percent
        );
        if let (Some(b), Some(a)) = (self.loss_before, self.loss_after) {
            let _ = writeln!(s, "reference-batch loss: {b:.6} -> {a:.6}");
        }
        s
    }
}

/// Recounts nonzero parameters from the tensors and cross-checks the masks:
/// a masked position holding a nonzero value is an integrity error. Zeros
/// are counted in prunable tensors (conv and linear weights, plus anything
/// masked); biases and batch-norm parameters always count as retained, so
/// an unpruned model reports no reduction even where a bias is exactly 0.
pub fn sparsity_report(model: &Model, masks: Option<&PruneMask>) -> Result<SparsityReport> {
    if let Some(m) = masks {
        m.check_against(&model.params)?;
        for (name, mask) in &m.masks {
            let t = &model.params[name];
            if let Some(i) = mask.data().iter().zip(t.data()).position(|(&k, &v)| k == 0 && v != 0.0) {
                return Err(Error::Integrity(format!("`{name}`[{i}] is masked but holds {}", t.data()[i])));
            }
        }
    }
    let mut prunable: BTreeSet<String> = target_names(model, &PruneTargets::default()).into_iter().collect();
    if let Some(m) = masks {
        prunable.extend(m.masks.keys().cloned());
    }
    let mut per_layer: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    for (name, t) in &model.params {
        let layer = name.rsplit_once('.').map_or(name.as_str(), |(l, _)| l);
        let e = per_layer.entry(layer.to_string()).or_default();
        e.0 += t.len() as u64;
        e.1 += if prunable.contains(name) { t.data().iter().filter(|&&v| v != 0.0).count() } else { t.len() } as u64;
    }
    // Report layers in graph order rather than alphabetically.
    let mut rows = Vec::with_capacity(per_layer.len());
    for l in model.layers() {
        if let Some((total, nonzero)) = per_layer.remove(&l.name) {
            rows.push(LayerSparsity { name: l.name.clone(), total, nonzero });
        }
    }
    rows.extend(per_layer.into_iter().map(|(name, (total, nonzero))| LayerSparsity { name, total, nonzero }));
    let total: u64 = rows.iter().map(|r| r.total).sum();
    let nonzero: u64 = rows.iter().map(|r| r.nonzero).sum();
    let reduction_percent = if total == 0 { 0.0 } else { (1.0 - nonzero as f64 / total as f64) * 100.0 };
    Ok(SparsityReport { total, nonzero, reduction_percent, per_layer: rows, loss_before: None, loss_after: None })
}

/// Zeroes every target weight with `|θ| < τ`. Masks already present on the
/// model are intersected with the new ones.
pub fn apply_prune(model: &Model, config: &PruneConfig) -> Result<(Model, PruneMask, SparsityReport)> {
    let thresholds = compute_threshold(model, config)?;
    let mut out = model.clone();
    let mut masks = BTreeMap::new();
    for name in target_names(model, &config.targets) {
        let tau = thresholds.for_tensor(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let prior = model.masks.as_ref().and_then(|m| m.masks.get(&name));
        let t = out.params.get_mut(&name).ok_or_else(|| Error::MissingTensor(name.clone()))?;
        let mut keep = Vec::with_capacity(t.len());
        for (i, v) in t.data_mut().iter_mut().enumerate() {
            let survives = v.abs() >= tau && prior.is_none_or(|p| p.data()[i] == 1);
            if !survives {
                *v = 0.0;
            }
            keep.push(survives as u8);
        }
        masks.insert(name, Tensor::new(t.shape(), keep)?);
    }
    let mask = PruneMask { masks, thresholds };
    // An all-ones mask on a previously unmasked model carries no information;
    // leaving it off keeps a no-op prune byte-identical to its input.
    if mask.pruned_count() > 0 || model.masks.is_some() {
        out.masks = Some(mask.clone());
    }
    let report = sparsity_report(&out, Some(&mask))?;
    Ok((out, mask, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantile_interpolates() {
        let mut v = [0.1f32, 0.2, 0.5, 0.9];
        let t = quantile(&mut v, 0.5).unwrap();
        assert!((t - 0.35).abs() < 1e-7);
        let mut v = [3.0f32, 1.0, 2.0];
        assert_eq!(quantile(&mut v, 0.0).unwrap(), 1.0);
        assert_eq!(quantile(&mut v, 1.0).unwrap(), 3.0);
        assert!(quantile(&mut [], 0.5).is_err());
    }

    #[test]
    fn config_bounds() {
        let mut c = PruneConfig::default();
        assert!(c.validate().is_ok());
        c.retain_quantile = 1.0;
        assert!(c.validate().is_err());
        c.retain_quantile = -0.1;
        assert!(c.validate().is_err());
    }
}
