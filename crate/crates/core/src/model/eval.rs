use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{forward_sequence, ModelParams, TraceValues};
use crate::data::{score_indices, Normalization, Sequence, FEATURE_NAMES};
use crate::error::{Error, Result};
use crate::metrics::{mape, mauc, r2, recall_precision, EvalReport};
use crate::tensor::{Matrix, Tape};

fn run(params: &ModelParams, seq: &Sequence) -> Result<TraceValues> {
    let mut t = Tape::inference();
    let trace = forward_sequence(&mut t, params, seq)?;
    Ok(trace.values(&t))
}

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
        .0
}

/// Classification metrics over every labeled visit, and one-step-ahead
/// MAPE / R² of the cognitive scores at visits 2..T. Scores are compared in
/// raw units when `norm` is given.
pub fn evaluate(params: &ModelParams, sequences: &[Sequence], norm: Option<&Normalization>) -> Result<EvalReport> {
    if sequences.is_empty() {
        return Err(Error::Empty("evaluation sequences"));
    }
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    let scores = score_indices();
    let mut pred: Vec<Vec<f64>> = vec![Vec::new(); scores.len()];
    let mut target: Vec<Vec<f64>> = vec![Vec::new(); scores.len()];
    for seq in sequences {
        let v = run(params, seq)?;
        for (i, label) in seq.labels.iter().enumerate() {
            if let Some(k) = label {
                probs.push(v.probs[i].clone());
                labels.push(*k);
            }
        }
        for i in 1..seq.len() {
            for (slot, f) in scores.clone().enumerate() {
                if f >= seq.n_features() || seq.mask.get(i, f) == 0.0 {
                    continue;
                }
                let (p, y) = (v.decoded[i][f], seq.features.get(i, f));
                let (p, y) = match norm {
                    Some(n) => (n.invert(f, p, f64::NAN), n.invert(f, y, f64::NAN)),
                    None => (p, y),
                };
                pred[slot].push(p);
                target[slot].push(y);
            }
        }
    }
    let preds: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
    let (recall, precision) = recall_precision(&preds, &labels, params.config.n_classes)?;
    let mut mape_map = BTreeMap::new();
    let mut r2_map = BTreeMap::new();
    for (slot, f) in scores.enumerate() {
        if pred[slot].is_empty() {
            continue;
        }
        let ones = vec![1.0; pred[slot].len()];
        mape_map.insert(FEATURE_NAMES[f].to_string(), mape(&pred[slot], &target[slot], &ones)?);
        r2_map.insert(FEATURE_NAMES[f].to_string(), r2(&pred[slot], &target[slot], &ones)?);
    }
    Ok(EvalReport {
        mauc: mauc(&probs, &labels)?,
        recall,
        precision,
        mape: mape_map,
        r2: r2_map,
        visits: labels.len(),
    })
}

/// Sequence features with unobserved entries filled by the model. Observed
/// entries are copied unchanged.
pub fn impute(params: &ModelParams, seq: &Sequence) -> Result<Matrix> {
    let v = run(params, seq)?;
    let mut out = seq.features.clone();
    for i in 0..seq.len() {
        for f in 0..seq.n_features() {
            if seq.mask.get(i, f) == 0.0 {
                out.set(i, f, v.imputed[i][f]);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastPoint {
    /// Months since the first visit.
    pub months: f64,
    pub features: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Rolls the model past the last visit: each grid offset (months after the
/// last visit, strictly increasing and positive) is appended as a fully
/// unobserved visit.
pub fn forecast(params: &ModelParams, seq: &Sequence, offsets: &[f64]) -> Result<Vec<ForecastPoint>> {
    if offsets.is_empty() {
        return Ok(Vec::new());
    }
    if !(offsets[0] > 0.0) || offsets.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidArgument("forecast grid must be positive and strictly increasing".into()));
    }
    let last = *seq.times.last().ok_or(Error::Empty("sequence visits"))?;
    let c = seq.n_features();
    let mut rows: Vec<Vec<f64>> = (0..seq.len()).map(|i| seq.visit(i).to_vec()).collect();
    let mut times = seq.times.clone();
    let mut labels = seq.labels.clone();
    for &o in offsets {
        rows.push(vec![f64::NAN; c]);
        times.push(last + o);
        labels.push(None);
    }
    let extended = Sequence::new(seq.subject_id.clone(), times.clone(), &rows, labels, Vec::new())?;
    let v = run(params, &extended)?;
    Ok((seq.len()..extended.len())
        .map(|i| ForecastPoint {
            months: times[i],
            features: v.imputed[i].clone(),
            probs: v.probs[i].clone(),
        })
        .collect())
}

/// Trend reversals in imputed trajectories.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationCount {
    /// Steps moving against the configured direction.
    pub violations: usize,
    /// Steps examined: consecutive visits where at least one end of the
    /// feature was filled by the model.
    pub steps: usize,
}

/// Counts steps `i-1 -> i` of the merged trajectory with
/// `direction[f] * (s_i - s_{i-1}) < 0`. Steps between two observed values
/// are skipped since the model cannot change them.
pub fn count_violations(params: &ModelParams, sequences: &[Sequence], direction: &[f64]) -> Result<ViolationCount> {
    let mut out = ViolationCount::default();
    for seq in sequences {
        if direction.len() != seq.n_features() {
            return Err(Error::ShapeMismatch {
                op: "count_violations",
                left: (direction.len(), 1),
                right: (seq.n_features(), 1),
            });
        }
        let v = run(params, seq)?;
        for i in 1..seq.len() {
            for (f, &dir) in direction.iter().enumerate() {
                if dir == 0.0 || (seq.mask.get(i - 1, f) == 1.0 && seq.mask.get(i, f) == 1.0) {
                    continue;
                }
                out.steps += 1;
                if dir * (v.imputed[i][f] - v.imputed[i - 1][f]) < 0.0 {
                    out.violations += 1;
                }
            }
        }
    }
    Ok(out)
}
