//! Classification and regression metrics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAPE_EPS: f64 = 1e-8;

/// Average ranks (1-based) with ties sharing their midrank.
fn midranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// `A(i|j)`: probability that a class-`i` sample scores higher on column `i`
/// than a class-`j` sample, ties counting one half.
fn pairwise_auc(probs: &[Vec<f64>], labels: &[usize], i: usize, j: usize) -> f64 {
    let members: Vec<usize> = (0..labels.len()).filter(|&n| labels[n] == i || labels[n] == j).collect();
    let scores: Vec<f64> = members.iter().map(|&n| probs[n][i]).collect();
    let ranks = midranks(&scores);
    let ni = members.iter().filter(|&&n| labels[n] == i).count() as f64;
    let nj = members.len() as f64 - ni;
    let si: f64 = members.iter().zip(&ranks).filter(|(&n, _)| labels[n] == i).map(|(_, r)| r).sum();
    (si - ni * (ni + 1.0) / 2.0) / (ni * nj)
}

/// Hand and Till multiclass AUC: mean over unordered class pairs of
/// `(A(i|j) + A(j|i)) / 2`. Pairs with an absent class are skipped.
pub fn mauc(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Empty("mauc samples"));
    }
    if probs.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} score rows but {} labels", probs.len(), labels.len())));
    }
    let k = probs[0].len();
    if let Some(n) = probs.iter().position(|r| r.len() != k) {
        return Err(Error::InvalidArgument(format!("score row {n} has length {}", probs[n].len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidArgument(format!("label {l} outside 0..{k}")));
    }
    let counts = class_counts(labels, k);
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            if counts[i] == 0 || counts[j] == 0 {
                warn!("mauc: skipping class pair ({i}, {j}) with an empty class");
                continue;
            }
            total += (pairwise_auc(probs, labels, i, j) + pairwise_auc(probs, labels, j, i)) / 2.0;
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::InvalidArgument("mauc needs samples from at least two classes".into()));
    }
    Ok(total / pairs as f64)
}

fn class_counts(labels: &[usize], k: usize) -> Vec<usize> {
    let mut c = vec![0; k];
    for &l in labels {
        c[l] += 1;
    }
    c
}

/// `m[true][pred]` counts.
pub fn confusion_matrix(preds: &[usize], labels: &[usize], k: usize) -> Vec<Vec<usize>> {
    let mut m = vec![vec![0; k]; k];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

/// Macro recall and precision over classes present in `labels`. A class
/// that is never predicted has precision 0.
pub fn recall_precision(preds: &[usize], labels: &[usize], k: usize) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(Error::Empty("recall_precision samples"));
    }
    if preds.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} predictions but {} labels", preds.len(), labels.len())));
    }
    if let Some(&v) = preds.iter().chain(labels).find(|&&v| v >= k) {
        return Err(Error::InvalidArgument(format!("class {v} outside 0..{k}")));
    }
    let m = confusion_matrix(preds, labels, k);
    let (mut rec, mut prec, mut n) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let actual: usize = m[c].iter().sum();
        if actual == 0 {
            continue;
        }
        let predicted: usize = (0..k).map(|r| m[r][c]).sum();
        rec += m[c][c] as f64 / actual as f64;
        prec += if predicted == 0 { 0.0 } else { m[c][c] as f64 / predicted as f64 };
        n += 1.0;
    }
    Ok((rec / n, prec / n))
}

fn observed<'a>(pred: &'a [f64], target: &'a [f64], mask: &'a [f64]) -> Result<Vec<(f64, f64)>> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::InvalidArgument(format!(
            "lengths differ: {} predictions, {} targets, {} mask entries",
            pred.len(),
            target.len(),
            mask.len()
        )));
    }
    let pairs: Vec<(f64, f64)> = pred
        .iter()
        .zip(target)
        .zip(mask)
        .filter(|(_, &m)| m != 0.0)
        .map(|((&p, &t), _)| (p, t))
        .collect();
    if pairs.is_empty() {
        return Err(Error::Empty("observed entries"));
    }
    Ok(pairs)
}

/// Mean of `|pred - target| / (|target| + eps)` over masked-in entries.
pub fn mape(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    let pairs = observed(pred, target, mask)?;
    Ok(pairs.iter().map(|(p, t)| (p - t).abs() / (t.abs() + MAPE_EPS)).sum::<f64>() / pairs.len() as f64)
}

/// `1 - SS_res / SS_tot` over masked-in entries. Constant targets give
/// `-inf`, `NaN` or `1` depending on the residual, as the formula dictates.
pub fn r2(pred: &[f64], target: &[f64], mask: &[f64]) -> Result<f64> {
    let pairs = observed(pred, target, mask)?;
    let mean = pairs.iter().map(|(_, t)| t).sum::<f64>() / pairs.len() as f64;
    let ss_res: f64 = pairs.iter().map(|(p, t)| (p - t).powi(2)).sum();
    let ss_tot: f64 = pairs.iter().map(|(_, t)| (t - mean).powi(2)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mauc: f64,
    pub recall: f64,
    pub precision: f64,
    pub mape: BTreeMap<String, f64>,
    pub r2: BTreeMap<String, f64>,
    /// Labeled visits scored for classification.
    pub visits: usize,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12}{:>12}", "metric", "value");
        let _ = writeln!(s, "{:<12}{:>12.6}", "mAUC", self.mauc);
        let _ = writeln!(s, "{:<12}{:>12.6}", "recall", self.recall);
        let _ = writeln!(s, "{:<12}{:>12.6}", "precision", self.precision);
        for (name, v) in &self.mape {
            let _ = writeln!(s, "{:<12}{:>12.6}", format!("MAPE {name}"), v);
        }
        for (name, v) in &self.r2 {
            let _ = writeln!(s, "{:<12}{:>12.6}", format!("R2 {name}"), v);
        }
        let _ = writeln!(s, "{:<12}{:>12}", "visits", self.visits);
        s
    }
}
