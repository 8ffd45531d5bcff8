//! Confusion matrix, per-class precision/recall/F1, one-vs-rest ROC and
//! precision-recall curves.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub classes: Vec<String>,
}

impl ConfusionMatrix {
    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.counts[c][c]
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.num_classes()).filter(|&t| t != c).map(|t| self.counts[t][c]).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.num_classes()).filter(|&p| p != c).map(|p| self.counts[c][p]).sum()
    }

    pub fn true_negatives(&self, c: usize) -> u64 {
        self.total() - self.true_positives(c) - self.false_positives(c) - self.false_negatives(c)
    }

    pub fn to_table(&self) -> String {
        let w = self.classes.iter().map(String::len).max().unwrap_or(4).max(6);
        let mut s = String::new();
        let _ = write!(s, "{:<w$}", "true\\pred");
        for c in &self.classes {
            let _ = write!(s, " {c:>w$}");
        }
        s.push('\n');
        for (name, row) in self.classes.iter().zip(&self.counts) {
            let _ = write!(s, "{name:<w$}");
            for v in row {
                let _ = write!(s, " {v:>w$}");
            }
            s.push('\n');
        }
        s
    }
}

fn default_names(c: usize) -> Vec<String> {
    (0..c).map(|i| format!("class{i}")).collect()
}

pub fn confusion_matrix(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::invalid(format!("{} predictions for {} labels", predictions.len(), labels.len())));
    }
    if num_classes == 0 {
        return Err(Error::invalid("confusion matrix needs at least one class"));
    }
    let mut counts = vec![vec![0u64; num_classes]; num_classes];
    for (i, (&p, &t)) in predictions.iter().zip(labels).enumerate() {
        if p >= num_classes || t >= num_classes {
            return Err(Error::invalid(format!("sample {i}: class pair ({t}, {p}) outside [0, {num_classes})")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix { counts, classes: default_names(num_classes) })
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Empty("confusion matrix"));
    }
    let trace: u64 = (0..cm.num_classes()).map(|c| cm.counts[c][c]).sum();
    Ok(trace as f64 / total as f64)
}

/// A ratio whose denominator may be zero; then `value` is 0 and
/// `undefined` is set.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rate {
    pub value: f64,
    pub undefined: bool,
}

impl Rate {
    fn ratio(num: u64, den: u64) -> Rate {
        if den == 0 {
            Rate { value: 0.0, undefined: true }
        } else {
            Rate { value: num as f64 / den as f64, undefined: false }
        }
    }
}

pub fn precision(cm: &ConfusionMatrix, class: usize) -> Rate {
    let tp = cm.true_positives(class);
    Rate::ratio(tp, tp + cm.false_positives(class))
}

/// Sensitivity, `TP / (TP + FN)`.
pub fn recall(cm: &ConfusionMatrix, class: usize) -> Rate {
    let tp = cm.true_positives(class);
    Rate::ratio(tp, tp + cm.false_negatives(class))
}

pub fn f1(cm: &ConfusionMatrix, class: usize) -> Rate {
    let (p, r) = (precision(cm, class), recall(cm, class));
    if p.undefined || r.undefined || p.value + r.value == 0.0 {
        return Rate { value: 0.0, undefined: true };
    }
    Rate { value: 2.0 * p.value * r.value / (p.value + r.value), undefined: false }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoints {
    /// Descending; the first entry is +∞ (nothing predicted positive).
    pub thresholds: Vec<f64>,
    /// FPR for ROC, recall for PR.
    pub x: Vec<f64>,
    /// TPR for ROC, precision for PR.
    pub y: Vec<f64>,
    /// AUC for ROC, average precision for PR.
    pub area: f64,
}

impl CurvePoints {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,x,y\n");
        for ((t, x), y) in self.thresholds.iter().zip(&self.x).zip(&self.y) {
            let _ = writeln!(s, "{t},{x},{y}");
        }
        s
    }
}

/// Cumulative (TP, FP) after each distinct score, scores descending.
fn sweep(scores: &[f64], positive: &[bool]) -> Result<Vec<(f64, u64, u64)>> {
    if scores.len() != positive.len() {
        return Err(Error::invalid(format!("{} scores for {} labels", scores.len(), positive.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("scores contain NaN"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut steps = Vec::new();
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        steps.push((s, tp, fp));
    }
    Ok(steps)
}

fn one_vs_rest(scores: &Tensor<f32>, labels: &[usize], class: usize) -> Result<(Vec<f64>, Vec<bool>)> {
    let (n, c) = scores.dims2("curve")?;
    if n != labels.len() {
        return Err(Error::invalid(format!("{n} score rows for {} labels", labels.len())));
    }
    if class >= c {
        return Err(Error::invalid(format!("class {class} outside [0, {c})")));
    }
    let s = (0..n).map(|i| scores.data()[i * c + class] as f64).collect();
    Ok((s, labels.iter().map(|&l| l == class).collect()))
}

/// ROC from binary scores; tied scores form one step, AUC by trapezoids.
pub fn roc_from_scores(scores: &[f64], positive: &[bool]) -> Result<CurvePoints> {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    let n = positive.len() as f64 - p;
    if p == 0.0 || n == 0.0 {
        return Err(Error::invalid("ROC needs at least one positive and one negative sample"));
    }
    let mut c = CurvePoints { thresholds: vec![f64::INFINITY], x: vec![0.0], y: vec![0.0], area: 0.0 };
    for (s, tp, fp) in sweep(scores, positive)? {
        let (x, y) = (fp as f64 / n, tp as f64 / p);
        let (px, py) = (*c.x.last().unwrap(), *c.y.last().unwrap());
        c.area += (x - px) * (y + py) / 2.0;
        c.thresholds.push(s);
        c.x.push(x);
        c.y.push(y);
    }
    Ok(c)
}

/// Precision-recall from binary scores; `AP = Σ (R_k − R_{k−1})·P_k`.
pub fn pr_from_scores(scores: &[f64], positive: &[bool]) -> Result<CurvePoints> {
    let p = positive.iter().filter(|&&b| b).count() as f64;
    if p == 0.0 {
        return Err(Error::invalid("precision-recall needs at least one positive sample"));
    }
    let mut c = CurvePoints { thresholds: vec![f64::INFINITY], x: vec![0.0], y: vec![1.0], area: 0.0 };
    for (s, tp, fp) in sweep(scores, positive)? {
        let (r, pr) = (tp as f64 / p, tp as f64 / (tp + fp) as f64);
        c.area += (r - c.x.last().unwrap()) * pr;
        c.thresholds.push(s);
        c.x.push(r);
        c.y.push(pr);
    }
    Ok(c)
}

/// One-vs-rest ROC for `class` over an N×C score matrix.
pub fn roc_curve(scores: &Tensor<f32>, labels: &[usize], class: usize) -> Result<CurvePoints> {
    let (s, pos) = one_vs_rest(scores, labels, class)?;
    roc_from_scores(&s, &pos).map_err(|e| Error::invalid(format!("class {class}: {e}")))
}

pub fn pr_curve(scores: &Tensor<f32>, labels: &[usize], class: usize) -> Result<CurvePoints> {
    let (s, pos) = one_vs_rest(scores, labels, class)?;
    pr_from_scores(&s, &pos).map_err(|e| Error::invalid(format!("class {class}: {e}")))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub support: u64,
    pub precision: Rate,
    pub recall: Rate,
    pub f1: Rate,
    pub roc: Option<CurvePoints>,
    pub pr: Option<CurvePoints>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub confusion: ConfusionMatrix,
    pub per_class: Vec<ClassMetrics>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}", "class", "precision", "recall", "f1", "auc", "ap", "n");
        let area = |c: &Option<CurvePoints>| c.as_ref().map_or(String::from("-"), |c| format!("{:.4}", c.area));
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
                c.name,
                c.precision.value,
                c.recall.value,
                c.f1.value,
                area(&c.roc),
                area(&c.pr),
                c.support
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>9.4} {:>9.4} {:>9.4}",
            "macro", self.macro_precision, self.macro_recall, self.macro_f1
        );
        let _ = writeln!(s, "accuracy {:.4} ({} samples)", self.accuracy, self.confusion.total());
        s
    }
}

/// Argmax predictions of an N×C logit matrix; ties go to the lowest class.
pub fn argmax_rows(logits: &Tensor<f32>) -> Result<Vec<usize>> {
    let (_, c) = logits.dims2("argmax")?;
    Ok(logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
        })
        .collect())
}

/// Full report from raw logits. Curves for a class are omitted when its
/// one-vs-rest split is degenerate.
pub fn evaluate_logits(logits: &Tensor<f32>, labels: &[usize], class_names: &[String]) -> Result<EvalReport> {
    let (n, c) = logits.dims2("evaluate")?;
    if n == 0 {
        return Err(Error::Empty("evaluation set"));
    }
    if !class_names.is_empty() && class_names.len() != c {
        return Err(Error::invalid(format!("{} class names for {c} logits", class_names.len())));
    }
    let preds = argmax_rows(logits)?;
    let mut cm = confusion_matrix(&preds, labels, c)?;
    if !class_names.is_empty() {
        cm.classes = class_names.to_vec();
    }
    let probs = ops::softmax(logits)?;
    let mut per_class = Vec::with_capacity(c);
    for k in 0..c {
        per_class.push(ClassMetrics {
            name: cm.classes[k].clone(),
            support: cm.counts[k].iter().sum(),
            precision: precision(&cm, k),
            recall: recall(&cm, k),
            f1: f1(&cm, k),
            roc: roc_curve(&probs, labels, k).ok(),
            pr: pr_curve(&probs, labels, k).ok(),
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / c as f64;
    Ok(EvalReport {
        accuracy: accuracy(&cm)?,
        macro_precision: mean(|m| m.precision.value),
        macro_recall: mean(|m| m.recall.value),
        macro_f1: mean(|m| m.f1.value),
        confusion: cm,
        per_class,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_matrix() {
        let cm = confusion_matrix(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(cm.counts, vec![vec![1, 1], vec![0, 1]]);
        assert!(confusion_matrix(&[0], &[0, 1], 2).is_err());
        assert!(confusion_matrix(&[2], &[0], 2).is_err());
    }

    #[test]
    fn precision_recall_f1() {
        // Class 1: TP=1, FP=1, FN=0.
        let cm = confusion_matrix(&[0, 1, 1], &[0, 0, 1], 2).unwrap();
        assert_eq!(precision(&cm, 1).value, 0.5);
        assert_eq!(recall(&cm, 1).value, 1.0);
        assert!((f1(&cm, 1).value - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn absent_class_is_undefined() {
        let cm = confusion_matrix(&[0, 1], &[0, 1], 3).unwrap();
        for r in [precision(&cm, 2), recall(&cm, 2), f1(&cm, 2)] {
            assert!(r.undefined);
            assert_eq!(r.value, 0.0);
        }
    }

    #[test]
    fn ap_single_positive_last() {
        let scores = [0.9, 0.8, 0.7, 0.1];
        let pos = [false, false, false, true];
        assert!((pr_from_scores(&scores, &pos).unwrap().area - 0.25).abs() < 1e-15);
    }

    #[test]
    fn roc_perfect_and_inverted() {
        let pos = [true, true, false, false];
        assert_eq!(roc_from_scores(&[0.9, 0.8, 0.2, 0.1], &pos).unwrap().area, 1.0);
        assert_eq!(roc_from_scores(&[0.1, 0.2, 0.8, 0.9], &pos).unwrap().area, 0.0);
        assert!(roc_from_scores(&[0.1, 0.2], &[true, true]).is_err());
    }
}
