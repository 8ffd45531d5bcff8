//! Reverse-mode differentiation over a linear tape of primitive calls.
//!
//! Each primitive appends one node holding its output and whatever it needs
//! for the backward pass. `backward` walks the nodes in exact reverse order
//! and accumulates input gradients in that fixed order.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::ops::{self, BnStats};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Batch-norm statistics source.
pub enum BnMode<'a, T> {
    /// Batch statistics; gradients flow through them.
    Train,
    /// Fixed running statistics.
    Eval { mean: &'a Tensor<T>, var: &'a Tensor<T> },
}

enum Op<T> {
    Leaf,
    Conv { x: usize, w: usize, b: Option<usize>, stride: usize, pad: usize },
    BatchNorm { x: usize, gamma: usize, beta: usize, stats: BnStats<T>, eps: f64, train: bool },
    Relu { x: usize },
    MaxPool { x: usize, argmax: Vec<usize> },
    AvgPool { x: usize },
    Linear { x: usize, w: usize, b: Option<usize> },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Sum { x: usize },
    Softmax { x: usize },
    SoftmaxCrossEntropy { logits: usize, labels: Vec<usize>, probs: Tensor<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<String>,
}

/// Deliberate backward-pass defects, used only as negative controls for the
/// gradient checker.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Doubles every convolution weight gradient.
    ConvWeightGradScaled,
}

pub struct Tape<T> {
    id: u64,
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

/// Result of [`Tape::backward`].
pub struct Gradients<T> {
    tape: u64,
    by_node: Vec<Option<Tensor<T>>>,
    by_param: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradients of named parameters, ordered by name.
    pub fn params(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.by_param
    }

    pub fn into_params(self) -> BTreeMap<String, Tensor<T>> {
        self.by_param
    }

    /// Gradient of a leaf created with `requires_grad`.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.by_node.get(v.index)?.as_ref()
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    #[doc(hidden)]
    pub fn inject_fault(&mut self, fault: Option<Fault>) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool, param: Option<String>) -> Var {
        self.nodes.push(Node { value, op, requires_grad, param });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Disconnected);
        }
        Ok(v.index)
    }

    fn rg(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    /// A constant or input value.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad, None)
    }

    /// A named trainable parameter; its gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true, Some(name.into()))
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let y = ops::conv2d(
            &self.nodes[xi].value,
            &self.nodes[wi].value,
            bi.map(|i| &self.nodes[i].value),
            stride,
            pad,
        )?;
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|i| self.rg(i));
        Ok(self.push(y, Op::Conv { x: xi, w: wi, b: bi, stride, pad }, rg, None))
    }

    /// Returns the output and, in training mode, the batch statistics used.
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BnStats<T>>)> {
        let (xi, gi, bi) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (xv, gv, bv) = (&self.nodes[xi].value, &self.nodes[gi].value, &self.nodes[bi].value);
        let (y, stats, train) = match mode {
            BnMode::Train => {
                let (y, s) = ops::batchnorm_train(xv, gv, bv, eps)?;
                (y, s, true)
            }
            BnMode::Eval { mean, var } => {
                let y = ops::batchnorm_eval(xv, gv, bv, mean, var, eps)?;
                let s = BnStats { mean: mean.data().to_vec(), var: var.data().to_vec() };
                (y, s, false)
            }
        };
        let rg = self.rg(xi) || self.rg(gi) || self.rg(bi);
        let out_stats = train.then(|| stats.clone());
        let v = self.push(y, Op::BatchNorm { x: xi, gamma: gi, beta: bi, stats, eps, train }, rg, None);
        Ok((v, out_stats))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = ops::relu(&self.nodes[xi].value);
        let rg = self.rg(xi);
        Ok(self.push(y, Op::Relu { x: xi }, rg, None))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let (y, argmax) = ops::maxpool2d(&self.nodes[xi].value, kernel, stride, pad)?;
        let rg = self.rg(xi);
        Ok(self.push(y, Op::MaxPool { x: xi, argmax }, rg, None))
    }

    pub fn global_avgpool(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = ops::global_avgpool(&self.nodes[xi].value)?;
        let rg = self.rg(xi);
        Ok(self.push(y, Op::AvgPool { x: xi }, rg, None))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let y = ops::linear(&self.nodes[xi].value, &self.nodes[wi].value, bi.map(|i| &self.nodes[i].value))?;
        let rg = self.rg(xi) || self.rg(wi) || bi.is_some_and(|i| self.rg(i));
        Ok(self.push(y, Op::Linear { x: xi, w: wi, b: bi }, rg, None))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let y = ops::add(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(y, Op::Add { a: ai, b: bi }, rg, None))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let y = ops::mul(&self.nodes[ai].value, &self.nodes[bi].value)?;
        let rg = self.rg(ai) || self.rg(bi);
        Ok(self.push(y, Op::Mul { a: ai, b: bi }, rg, None))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.nodes[xi].value.data().iter().copied().sum::<T>();
        let rg = self.rg(xi);
        Ok(self.push(Tensor::scalar(s), Op::Sum { x: xi }, rg, None))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let y = ops::softmax(&self.nodes[xi].value)?;
        let rg = self.rg(xi);
        Ok(self.push(y, Op::Softmax { x: xi }, rg, None))
    }

    /// Mean cross-entropy of `logits` against integer labels, as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let (loss, probs) = ops::softmax_cross_entropy(&self.nodes[li].value, labels)?;
        let rg = self.rg(li);
        let op = Op::SoftmaxCrossEntropy { logits: li, labels: labels.to_vec(), probs };
        Ok(self.push(Tensor::scalar(loss), op, rg, None))
    }

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        let lv = &self.nodes[li].value;
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(Tensor::new(lv.shape(), vec![T::one()])?);
        let mut by_param = BTreeMap::new();
        for i in (0..=li).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                if let Some(name) = &node.param {
                    by_param.insert(name.clone(), g.clone());
                }
                grads[i] = Some(g);
                continue;
            }
            for (target, contrib) in self.node_backward(node, &g)? {
                accumulate(&mut grads[target], contrib)?;
            }
        }
        Ok(Gradients { tape: self.id, by_node: grads, by_param })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(usize, Tensor<T>)>> {
        let val = |i: usize| &self.nodes[i].value;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, stride, pad } => {
                let cg = ops::conv2d_backward(val(*x), val(*w), b.is_some(), g, *stride, *pad, self.rg(*x))?;
                if let Some(dx) = cg.dx {
                    out.push((*x, dx));
                }
                if self.rg(*w) {
                    let mut dw = cg.dw;
                    if self.fault == Some(Fault::ConvWeightGradScaled) {
                        dw.data_mut().iter_mut().for_each(|v| *v = *v + *v);
                    }
                    out.push((*w, dw));
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    out.push((*b, db));
                }
            }
            Op::BatchNorm { x, gamma, beta, stats, eps, train } => {
                let bg = ops::batchnorm_backward(val(*x), val(*gamma), &stats.mean, &stats.var, *eps, g, *train)?;
                out.push((*x, bg.dx));
                out.push((*gamma, bg.dgamma));
                out.push((*beta, bg.dbeta));
            }
            Op::Relu { x } => out.push((*x, ops::relu_backward(val(*x), g)?)),
            Op::MaxPool { x, argmax } => out.push((*x, ops::maxpool2d_backward(val(*x).shape(), argmax, g)?)),
            Op::AvgPool { x } => out.push((*x, ops::global_avgpool_backward(val(*x).shape(), g)?)),
            Op::Linear { x, w, b } => {
                let lg = ops::linear_backward(val(*x), val(*w), g)?;
                out.push((*x, lg.dx));
                out.push((*w, lg.dw));
                if let Some(b) = b {
                    out.push((*b, lg.db));
                }
            }
            Op::Add { a, b } => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul { a, b } => {
                out.push((*a, ops::mul(g, val(*b))?));
                out.push((*b, ops::mul(g, val(*a))?));
            }
            Op::Sum { x } => {
                let s = g.data()[0];
                out.push((*x, Tensor::full(val(*x).shape(), s)?));
            }
            Op::Softmax { x } => out.push((*x, ops::softmax_backward(&node.value, g)?)),
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                out.push((*logits, ops::softmax_cross_entropy_backward(probs, labels, g.data()[0])?));
            }
        }
        out.retain(|(t, _)| self.rg(*t));
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(Error::shape("backward", format!("{:?} vs {:?}", acc.shape(), g.shape())));
            }
            for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_form_gradient_is_input() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap(), false);
        let w = tape.param("w", Tensor::new(&[3], vec![0.3, 0.1, -0.7]).unwrap());
        let p = tape.mul(w, x).unwrap();
        let loss = tape.sum(p).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.params()["w"].data(), &[1.0, -2.0, 0.5]);
        assert!(g.get(x).is_none());
    }

    #[test]
    fn loss_gradient_is_one() {
        let mut tape = Tape::<f32>::new();
        let w = tape.param("w", Tensor::scalar(2.0));
        let s = tape.sum(w).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(s).map(|t| t.data()[0]), None);
        assert_eq!(g.params()["w"].data(), &[1.0]);
    }

    #[test]
    fn cross_entropy_gradient_closed_form() {
        let mut tape = Tape::<f64>::new();
        let z = Tensor::new(&[2, 3], vec![0.2, -0.4, 1.0, 0.0, 0.5, -1.5]).unwrap();
        let zv = tape.leaf(z.clone(), true);
        let loss = tape.softmax_cross_entropy(zv, &[2, 0]).unwrap();
        let g = tape.backward(loss).unwrap();
        let p = ops::softmax(&z).unwrap();
        let mut expect = p.data().to_vec();
        expect[2] -= 1.0;
        expect[3] -= 1.0;
        for (a, e) in g.get(zv).unwrap().data().iter().zip(&expect) {
            assert!((a - e / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn foreign_and_non_scalar_losses_rejected() {
        let mut a = Tape::<f32>::new();
        let mut b = Tape::<f32>::new();
        let x = a.param("x", Tensor::scalar(1.0));
        let y = b.param("y", Tensor::new(&[2], vec![1.0, 2.0]).unwrap());
        assert_eq!(b.backward(x).err(), Some(Error::Disconnected));
        assert!(matches!(b.backward(y), Err(Error::NotScalar(_))));
        assert!(b.relu(x).is_err());
    }
}
