//! Classification metrics and reports.
//!
//! Predictions are `argmax` over logits with ties going to the lowest class
//! index. Macro recall and macro F1 average over the classes that occur in
//! the labels; classes with no true instances are left out of the mean.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{BenchmarkData, Dataset};
use crate::error::{Error, Result};
use crate::model::{EncoderParams, Params};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitMetrics {
    pub split: String,
    pub acc: f64,
    pub loss: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub n: usize,
}

/// `confusion[true][pred]`.
pub fn confusion(labels: &[usize], preds: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    if labels.len() != preds.len() {
        return Err(Error::shape(
            "confusion",
            format!("{} labels vs {} predictions", labels.len(), preds.len()),
        ));
    }
    let mut m = vec![vec![0usize; k]; k];
    for (&y, &p) in labels.iter().zip(preds) {
        if y >= k || p >= k {
            return Err(Error::Index(format!(
                "class {} out of range for K={k}",
                y.max(p)
            )));
        }
        m[y][p] += 1;
    }
    Ok(m)
}

fn present(labels: &[usize]) -> BTreeSet<usize> {
    labels.iter().copied().collect()
}

pub fn accuracy(labels: &[usize], preds: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = labels.iter().zip(preds).filter(|(a, b)| a == b).count();
    hits as f64 / labels.len() as f64
}

pub fn macro_recall(labels: &[usize], preds: &[usize], k: usize) -> Result<f64> {
    let m = confusion(labels, preds, k)?;
    let classes = present(labels);
    if classes.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = classes
        .iter()
        .map(|&c| m[c][c] as f64 / m[c].iter().sum::<usize>() as f64)
        .sum();
    Ok(total / classes.len() as f64)
}

pub fn macro_f1(labels: &[usize], preds: &[usize], k: usize) -> Result<f64> {
    let m = confusion(labels, preds, k)?;
    let classes = present(labels);
    if classes.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let tp = m[c][c] as f64;
            let fn_ = m[c].iter().sum::<usize>() as f64 - tp;
            let fp = (0..k).map(|r| m[r][c]).sum::<usize>() as f64 - tp;
            2.0 * tp / (2.0 * tp + fp + fn_)
        })
        .sum();
    Ok(total / classes.len() as f64)
}

/// Metrics from precomputed logits `[n × K]`.
pub fn metrics_from_logits(split: &str, logits: &Tensor, labels: &[usize]) -> Result<SplitMetrics> {
    if logits.rows() != labels.len() {
        return Err(Error::shape(
            "metrics",
            format!("{} logit rows vs {} labels", logits.rows(), labels.len()),
        ));
    }
    let k = logits.cols();
    let preds = logits.argmax_rows();
    let logp = logits.log_softmax()?;
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::Index(format!(
                "{split}: label {y} out of range for K={k}"
            )));
        }
        loss -= logp.at(i, y);
    }
    let n = labels.len();
    Ok(SplitMetrics {
        split: split.to_string(),
        acc: accuracy(labels, &preds),
        loss: if n > 0 { loss / n as f64 } else { 0.0 },
        recall_macro: macro_recall(labels, &preds, k)?,
        f1_macro: macro_f1(labels, &preds, k)?,
        n,
    })
}

pub fn evaluate(params: &Params, split: &Dataset) -> Result<SplitMetrics> {
    if split.num_classes != params.num_classes() {
        return Err(Error::shape(
            "evaluate",
            format!(
                "{} has {} classes, model has {}",
                split.name,
                split.num_classes,
                params.num_classes()
            ),
        ));
    }
    let logits = params.logits(&split.features_tensor()?)?;
    metrics_from_logits(&split.name, &logits, &split.labels)
}

/// Per-split metrics with the OOD average. The first split is the ID split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub splits: Vec<SplitMetrics>,
    pub ood_avg: f64,
}

impl MetricsReport {
    pub fn new(id: SplitMetrics, ood: Vec<SplitMetrics>) -> Self {
        let ood_avg = if ood.is_empty() {
            0.0
        } else {
            ood.iter().map(|m| m.acc).sum::<f64>() / ood.len() as f64
        };
        let mut splits = vec![id];
        splits.extend(ood);
        MetricsReport { splits, ood_avg }
    }

    pub fn id(&self) -> &SplitMetrics {
        &self.splits[0]
    }

    pub fn ood(&self) -> &[SplitMetrics] {
        &self.splits[1..]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,acc,loss,recall_macro,f1_macro,n\n");
        for m in &self.splits {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                m.split, m.acc, m.loss, m.recall_macro, m.f1_macro, m.n
            )
            .unwrap();
        }
        out
    }
}

/// Evaluates the ID test split and every OOD split in parallel.
pub fn evaluate_report(params: &Params, data: &BenchmarkData) -> Result<MetricsReport> {
    let splits = data.eval_splits();
    let mut all = splits
        .par_iter()
        .map(|s| evaluate(params, s))
        .collect::<Result<Vec<_>>>()?;
    let ood = all.split_off(1);
    Ok(MetricsReport::new(all.pop().expect("id split"), ood))
}

/// Accuracy on held-out classes using the frozen pretrained prototype rows
/// of those classes and `encoder`. `split` carries global labels.
pub fn zero_shot_transfer_eval(
    pretrained_prototypes: &Tensor,
    encoder: &EncoderParams,
    split: &Dataset,
    heldout_classes: &[usize],
    finetune_classes: &[usize],
) -> Result<f64> {
    let ft: BTreeSet<usize> = finetune_classes.iter().copied().collect();
    if let Some(c) = heldout_classes.iter().find(|c| ft.contains(c)) {
        return Err(Error::Config(format!(
            "held-out class {c} is also a fine-tuning class"
        )));
    }
    if heldout_classes.is_empty() {
        return Err(Error::Config("no held-out classes".into()));
    }
    let k = pretrained_prototypes.rows();
    if let Some(&c) = heldout_classes.iter().find(|&&c| c >= k) {
        return Err(Error::Index(format!(
            "held-out class {c} not in a {k}-row prototype table"
        )));
    }
    let rows = pretrained_prototypes.select_rows(heldout_classes)?;
    let logits = encoder
        .forward(&split.features_tensor()?)?
        .matmul_t(&rows)?;
    let preds = logits.argmax_rows();
    let mut hits = 0usize;
    for (&y, &p) in split.labels.iter().zip(&preds) {
        if !heldout_classes.contains(&y) {
            return Err(Error::Config(format!(
                "{}: label {y} is not a held-out class",
                split.name
            )));
        }
        if heldout_classes[p] == y {
            hits += 1;
        }
    }
    Ok(if split.is_empty() {
        0.0
    } else {
        hits as f64 / split.len() as f64
    })
}
