//! Utterance-level evaluation metrics and diagnostic aggregations.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::modality::PerModality;
use crate::tensor::Tensor;

fn check_inputs(preds: &[usize], labels: &[usize]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::Contract(
            "metrics need at least one prediction".into(),
        ));
    }
    if preds.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} labels",
            preds.len(),
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_inputs(preds, labels)?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / preds.len() as f64)
}

/// `confusion[y][p]` counts utterances with label `y` predicted as `p`.
pub fn confusion_matrix(
    preds: &[usize],
    labels: &[usize],
    classes: usize,
) -> Result<Vec<Vec<u64>>> {
    check_inputs(preds, labels)?;
    let mut c = vec![vec![0u64; classes]; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Contract(format!(
                "class index {} out of range for {classes} classes",
                p.max(y)
            )));
        }
        c[y][p] += 1;
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

fn class_stats(confusion: &[Vec<u64>]) -> Vec<ClassStats> {
    let k = confusion.len();
    (0..k)
        .map(|c| {
            let tp = confusion[c][c] as f64;
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = confusion.iter().map(|row| row[c]).sum();
            let ratio = |num: f64, den: u64| if den == 0 { 0.0 } else { num / den as f64 };
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassStats {
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect()
}

fn weighted(stats: &[ClassStats]) -> f64 {
    let total: u64 = stats.iter().map(|s| s.support).sum();
    stats
        .iter()
        .map(|s| s.support as f64 / total as f64 * s.f1)
        .sum()
}

/// Support-weighted mean of per-class F1 over the class indices seen in
/// either argument.
pub fn weighted_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_inputs(preds, labels)?;
    let classes = preds.iter().chain(labels).max().map_or(0, |m| m + 1);
    let c = confusion_matrix(preds, labels, classes)?;
    Ok(weighted(&class_stats(&c)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub per_class: Vec<ClassStats>,
    pub confusion: Vec<Vec<u64>>,
}

impl EvalReport {
    pub fn new(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        let confusion = confusion_matrix(preds, labels, classes)?;
        let per_class = class_stats(&confusion);
        Ok(EvalReport {
            accuracy: accuracy(preds, labels)?,
            weighted_f1: weighted(&per_class),
            per_class,
            confusion,
        })
    }
}

/// Batch mean of each modality's logit at the true class. `contributions`
/// holds one `N×E` matrix per conversation and modality.
pub fn logit_trace(
    contributions: &[PerModality<Option<Tensor>>],
    labels: &[&[usize]],
) -> Result<PerModality<Option<f64>>> {
    if contributions.is_empty() || contributions.len() != labels.len() {
        return Err(Error::Contract(
            "logit trace needs a nonempty, labelled batch".into(),
        ));
    }
    let mut sums = PerModality::splat(None::<(f64, usize)>);
    for (conv, ys) in contributions.iter().zip(labels) {
        for (m, c) in conv.iter() {
            let Some(c) = c else { continue };
            let (n, _) = c.dims2()?;
            if n != ys.len() {
                return Err(Error::shape(format!(
                    "{n} logit rows for {} labels",
                    ys.len()
                )));
            }
            let acc = sums[m].get_or_insert((0.0, 0));
            for (i, &y) in ys.iter().enumerate() {
                acc.0 += c.get(&[i, y]);
                acc.1 += 1;
            }
        }
    }
    Ok(sums.map(|_, s| s.map(|(total, n)| total / n as f64)))
}
