use serde::{Deserialize, Serialize};

use super::ForwardTrace;
use crate::data::{Sequence, TREND_DIRECTION};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Tape, Var};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonotonicMode {
    /// `|| sum_i tanh(k (s_i - s_{i-1})) ||_2`, a smooth form of the printed sign sum.
    AsWritten,
    /// `sum_i sum_f relu(dir_f (s_{i-1,f} - s_{i,f}))`.
    DirectionalHinge,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub delta: f64,
    pub monotonic_mode: MonotonicMode,
    pub surrogate_k: f64,
    /// Expected trend sign per feature, each in {-1, 0, 1}.
    pub direction: Vec<f64>,
    /// Include the last visit in the prediction loss.
    pub predict_last_visit: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.001,
            delta: 5.0,
            monotonic_mode: MonotonicMode::DirectionalHinge,
            surrogate_k: 50.0,
            direction: TREND_DIRECTION.to_vec(),
            predict_last_visit: true,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda1, self.lambda2, self.lambda3].iter().any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidArgument("loss weights must be non-negative".into()));
        }
        if !(self.delta >= 0.0) {
            return Err(Error::InvalidArgument("focal exponent must be non-negative".into()));
        }
        if let Some(d) = self.direction.iter().find(|d| ![-1.0, 0.0, 1.0].contains(*d)) {
            return Err(Error::InvalidArgument(format!("trend direction {d} is not -1, 0 or 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub estim: Var,
    pub pred: Var,
    pub penalty: Var,
    pub total: Var,
}

/// Squared error between the decoder's estimate and the observed entries of
/// visits 2..T, averaged over those visits.
pub fn estimation_loss(t: &mut Tape, trace: &ForwardTrace, seq: &Sequence) -> Result<Var> {
    let mut acc: Option<Var> = None;
    for i in 1..trace.len() {
        let mask = Matrix::column(seq.visit_mask(i));
        if mask.sum() == 0.0 {
            continue;
        }
        let target: Vec<f64> = seq
            .visit(i)
            .iter()
            .zip(seq.visit_mask(i))
            .filter(|(_, &m)| m == 1.0)
            .map(|(&v, _)| v)
            .collect();
        let pred = t.masked_select(trace.visits[i].decoded, &mask)?;
        let target = t.constant(Matrix::column(&target));
        let diff = t.sub(pred, target)?;
        let sq = t.square(diff);
        let term = t.sum(sq);
        acc = Some(match acc {
            Some(a) => t.add(a, term)?,
            None => term,
        });
    }
    Ok(match acc {
        Some(a) => t.scale(a, 1.0 / (trace.len() - 1) as f64),
        None => t.scalar_constant(0.0),
    })
}

/// Focal cross-entropy `-(1 - p)^delta log p` of the true class, averaged
/// over visits with a label. `labels` has one entry per visit.
pub fn focal_prediction_loss(
    t: &mut Tape,
    trace: &ForwardTrace,
    labels: &[Option<usize>],
    delta: f64,
    include_last: bool,
) -> Result<Var> {
    if labels.len() != trace.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels for {} visits",
            labels.len(),
            trace.len()
        )));
    }
    let upto = if include_last { trace.len() } else { trace.len().saturating_sub(1) };
    let mut acc: Option<Var> = None;
    let mut count = 0usize;
    for (i, label) in labels.iter().enumerate().take(upto) {
        let Some(k) = *label else { continue };
        let probs = trace.visits[i].probs;
        let n = t.shape(probs).0;
        if k >= n {
            return Err(Error::InvalidArgument(format!("label {k} outside 0..{n}")));
        }
        let mut onehot = Matrix::zeros(n, 1);
        onehot.set(k, 0, 1.0);
        let p = t.masked_select(probs, &onehot)?;
        let p = t.clamp_min(p, PROB_FLOOR);
        let logp = t.log(p)?;
        let term = if delta == 0.0 {
            logp
        } else {
            let q = t.one_minus(p);
            let q = t.clamp_min(q, 0.0);
            let w = t.pow(q, delta)?;
            t.mul(w, logp)?
        };
        acc = Some(match acc {
            Some(a) => t.add(a, term)?,
            None => term,
        });
        count += 1;
    }
    Ok(match acc {
        Some(a) => t.scale(a, -1.0 / count as f64),
        None => t.scalar_constant(0.0),
    })
}

/// Trend-reversal penalty over the merged trajectory.
pub fn monotonicity_penalty(t: &mut Tape, trace: &ForwardTrace, cfg: &LossConfig) -> Result<Var> {
    if cfg.monotonic_mode == MonotonicMode::Off || trace.len() < 2 {
        return Ok(t.scalar_constant(0.0));
    }
    let c = t.shape(trace.visits[0].imputed).0;
    if cfg.direction.len() != c && cfg.monotonic_mode == MonotonicMode::DirectionalHinge {
        return Err(Error::ShapeMismatch {
            op: "monotonicity_penalty",
            left: (cfg.direction.len(), 1),
            right: (c, 1),
        });
    }
    let mut acc: Option<Var> = None;
    for w in trace.visits.windows(2) {
        let step = match cfg.monotonic_mode {
            MonotonicMode::DirectionalHinge => {
                let back = t.sub(w[0].imputed, w[1].imputed)?;
                let dir = t.constant(Matrix::column(&cfg.direction));
                let signed = t.mul(back, dir)?;
                t.relu(signed)
            }
            MonotonicMode::AsWritten => {
                let fwd = t.sub(w[1].imputed, w[0].imputed)?;
                let s = t.scale(fwd, cfg.surrogate_k);
                t.tanh(s)
            }
            MonotonicMode::Off => unreachable!(),
        };
        acc = Some(match acc {
            Some(a) => t.add(a, step)?,
            None => step,
        });
    }
    let acc = acc.expect("at least one step");
    Ok(match cfg.monotonic_mode {
        MonotonicMode::DirectionalHinge => t.sum(acc),
        _ => {
            let sq = t.square(acc);
            let ss = t.sum(sq);
            t.sqrt(ss)?
        }
    })
}

/// Plain evaluation of the penalty on a trajectory. With `exact_sign` the
/// as-written mode uses `sgn` instead of its tanh surrogate.
pub fn monotonicity_value(traj: &[Vec<f64>], cfg: &LossConfig, exact_sign: bool) -> f64 {
    if traj.len() < 2 {
        return 0.0;
    }
    match cfg.monotonic_mode {
        MonotonicMode::Off => 0.0,
        MonotonicMode::DirectionalHinge => traj
            .windows(2)
            .map(|w| {
                (0..w[0].len())
                    .map(|f| (cfg.direction[f] * (w[0][f] - w[1][f])).max(0.0))
                    .sum::<f64>()
            })
            .sum(),
        MonotonicMode::AsWritten => {
            let mut acc = vec![0.0; traj[0].len()];
            for w in traj.windows(2) {
                for f in 0..acc.len() {
                    let d = w[1][f] - w[0][f];
                    acc[f] += if exact_sign {
                        if d > 0.0 {
                            1.0
                        } else if d < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    } else {
                        (cfg.surrogate_k * d).tanh()
                    };
                }
            }
            acc.iter().map(|a| a * a).sum::<f64>().sqrt()
        }
    }
}

/// `lambda1 L_estim + lambda2 L_pred + lambda3 penalty` with labels carried forward.
pub fn total_loss(t: &mut Tape, trace: &ForwardTrace, seq: &Sequence, cfg: &LossConfig) -> Result<LossParts> {
    cfg.validate()?;
    let estim = estimation_loss(t, trace, seq)?;
    let pred = focal_prediction_loss(t, trace, &seq.carried_labels(), cfg.delta, cfg.predict_last_visit)?;
    let penalty = monotonicity_penalty(t, trace, cfg)?;
    let a = t.scale(estim, cfg.lambda1);
    let b = t.scale(pred, cfg.lambda2);
    let c = t.scale(penalty, cfg.lambda3);
    let ab = t.add(a, b)?;
    let total = t.add(ab, c)?;
    Ok(LossParts {
        estim,
        pred,
        penalty,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward::VisitTrace;

    /// Trace whose decoded/imputed/probs nodes are constants.
    fn fake_trace(t: &mut Tape, decoded: &[Vec<f64>], imputed: &[Vec<f64>], probs: &[Vec<f64>]) -> ForwardTrace {
        let zero = t.constant(Matrix::zeros(1, 1));
        let visits = (0..decoded.len())
            .map(|i| VisitTrace {
                hidden: zero,
                tangent: zero,
                decoded: t.constant(Matrix::column(&decoded[i])),
                imputed: t.constant(Matrix::column(&imputed[i])),
                probs: t.constant(Matrix::column(&probs[i])),
            })
            .collect();
        ForwardTrace { visits }
    }

    fn seq(rows: &[Vec<f64>]) -> Sequence {
        let times = (0..rows.len()).map(|i| i as f64).collect();
        Sequence::new("x", times, rows, vec![None; rows.len()], vec![]).unwrap()
    }

    #[test]
    fn estimation_examples() {
        let rows = vec![vec![0.1, 0.2], vec![0.3, 0.4]];
        let mut t = Tape::inference();
        let tr = fake_trace(&mut t, &rows, &rows, &[vec![1.0], vec![1.0]]);
        let l = estimation_loss(&mut t, &tr, &seq(&rows)).unwrap();
        assert_eq!(t.scalar(l), 0.0);

        let off = vec![vec![0.1, 0.2], vec![0.8, 0.4]];
        let tr = fake_trace(&mut t, &off, &rows, &[vec![1.0], vec![1.0]]);
        let l = estimation_loss(&mut t, &tr, &seq(&rows)).unwrap();
        assert!((t.scalar(l) - 0.25).abs() < 1e-15);

        let missing = vec![vec![0.1, 0.2], vec![f64::NAN, f64::NAN]];
        let l = estimation_loss(&mut t, &tr, &seq(&missing)).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn focal_examples() {
        let mut t = Tape::inference();
        let v = vec![vec![0.0]];
        let tr = fake_trace(&mut t, &v, &v, &[vec![0.5, 0.25, 0.25]]);
        let l = focal_prediction_loss(&mut t, &tr, &[Some(0)], 2.0, true).unwrap();
        assert!((t.scalar(l) - 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!((t.scalar(l) - 0.17329).abs() < 1e-5);
        let ce = focal_prediction_loss(&mut t, &tr, &[Some(1)], 0.0, true).unwrap();
        assert!((t.scalar(ce) - 4f64.ln()).abs() < 1e-15);
        let sure = fake_trace(&mut t, &v, &v, &[vec![0.0, 1.0, 0.0]]);
        let l = focal_prediction_loss(&mut t, &sure, &[Some(1)], 5.0, true).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let l = focal_prediction_loss(&mut t, &sure, &[None], 5.0, true).unwrap();
        assert_eq!(t.scalar(l), 0.0);
        let l = focal_prediction_loss(&mut t, &tr, &[Some(0)], 2.0, false).unwrap();
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn penalty_examples() {
        let constant = vec![vec![0.5, 0.5]; 4];
        for mode in [MonotonicMode::AsWritten, MonotonicMode::DirectionalHinge, MonotonicMode::Off] {
            let cfg = LossConfig {
                monotonic_mode: mode,
                direction: vec![-1.0, 1.0],
                ..LossConfig::default()
            };
            assert_eq!(monotonicity_value(&constant, &cfg, true), 0.0);
            let mut t = Tape::inference();
            let tr = fake_trace(&mut t, &constant, &constant, &vec![vec![1.0]; 4]);
            let p = monotonicity_penalty(&mut t, &tr, &cfg).unwrap();
            assert_eq!(t.scalar(p), 0.0);
        }

        let rising: Vec<Vec<f64>> = (0..6).map(|i| vec![0.1 * i as f64]).collect();
        let cfg = LossConfig {
            monotonic_mode: MonotonicMode::AsWritten,
            direction: vec![1.0],
            ..LossConfig::default()
        };
        assert_eq!(monotonicity_value(&rising, &cfg, true), 5.0);

        let hippo = vec![vec![0.8], vec![0.7], vec![0.8], vec![0.6]];
        let cfg = LossConfig {
            direction: vec![-1.0],
            ..LossConfig::default()
        };
        assert!((monotonicity_value(&hippo, &cfg, false) - 0.1).abs() < 1e-12);
        let mut t = Tape::inference();
        let tr = fake_trace(&mut t, &hippo, &hippo, &vec![vec![1.0]; 4]);
        let p = monotonicity_penalty(&mut t, &tr, &cfg).unwrap();
        assert!((t.scalar(p) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn total_loss_weights() {
        let rows = vec![vec![0.1, 0.2], vec![0.3, 0.4], vec![0.2, 0.5]];
        let off = vec![vec![0.1, 0.2], vec![0.5, 0.1], vec![0.9, 0.5]];
        let s = Sequence::new("x", vec![0.0, 1.0, 2.0], &rows, vec![Some(0), None, Some(1)], vec![]).unwrap();
        let probs = vec![vec![0.6, 0.4], vec![0.3, 0.7], vec![0.5, 0.5]];
        let mut t = Tape::inference();
        let tr = fake_trace(&mut t, &off, &rows, &probs);
        let base = LossConfig {
            direction: vec![-1.0, 1.0],
            ..LossConfig::default()
        };
        let zero = LossConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..base.clone()
        };
        let parts = total_loss(&mut t, &tr, &s, &zero).unwrap();
        assert_eq!(t.scalar(parts.total), 0.0);
        let only_estim = LossConfig {
            lambda1: 1.0,
            ..zero.clone()
        };
        let parts = total_loss(&mut t, &tr, &s, &only_estim).unwrap();
        assert_eq!(t.scalar(parts.total), t.scalar(parts.estim));
        assert_eq!(base.lambda1, 1.0);
        assert_eq!(base.lambda2, 0.5);
        assert_eq!(base.lambda3, 0.001);
        assert_eq!(base.delta, 5.0);
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = LossConfig {
            delta: -1.0,
            ..LossConfig::default()
        };
        assert!(cfg.validate().is_err());
        assert!(serde_json::from_str::<MonotonicMode>("\"sideways\"").is_err());
    }
}
