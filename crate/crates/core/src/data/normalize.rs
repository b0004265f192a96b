use log::info;
use serde::{Deserialize, Serialize};

use super::{Cohort, Sequence, N_VOLUMETRIC};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IcvMode {
    /// Volumes are used as given.
    None,
    /// Each visit's volumes are divided by that visit's ICV.
    #[default]
    PerVisit,
    /// Each visit's volumes are divided by the subject's first known ICV.
    Baseline,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureScale {
    MinMax { min: f64, max: f64 },
    MaxDivide { max: f64 },
}

impl FeatureScale {
    pub fn forward(&self, v: f64) -> f64 {
        match *self {
            FeatureScale::MinMax { min, max } => (v - min) / (max - min),
            FeatureScale::MaxDivide { max } => v / max,
        }
    }

    pub fn inverse(&self, v: f64) -> f64 {
        match *self {
            FeatureScale::MinMax { min, max } => v * (max - min) + min,
            FeatureScale::MaxDivide { max } => v * max,
        }
    }
}

/// Fitted per-feature scaling. Volumes get min-max scaling after optional
/// ICV division; cognitive scores are divided by their maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub icv_mode: IcvMode,
    pub scales: Vec<FeatureScale>,
}

fn icv_divisors(seq: &Sequence, mode: IcvMode) -> Result<Vec<f64>> {
    let t = seq.len();
    match mode {
        IcvMode::None => Ok(vec![1.0; t]),
        _ if seq.icv.is_empty() => Err(Error::InvalidArgument(format!(
            "subject {}: ICV normalization requested but no ICV column",
            seq.subject_id
        ))),
        IcvMode::PerVisit => Ok(seq.icv.clone()),
        IcvMode::Baseline => {
            let base = seq.icv.iter().copied().find(|v| v.is_finite()).unwrap_or(f64::NAN);
            Ok(vec![base; t])
        }
    }
}

impl Normalization {
    /// Fits scaling statistics on the given training sequences.
    pub fn fit(cohort: &Cohort, train: &[usize], icv_mode: IcvMode) -> Result<Self> {
        let c = cohort.feature_names.len();
        let mut lo = vec![f64::INFINITY; c];
        let mut hi = vec![f64::NEG_INFINITY; c];
        for &k in train {
            let seq = &cohort.sequences[k];
            let div = icv_divisors(seq, icv_mode)?;
            for i in 0..seq.len() {
                for (f, &v) in seq.visit(i).iter().enumerate() {
                    let v = if f < N_VOLUMETRIC { v / div[i] } else { v };
                    if v.is_finite() {
                        lo[f] = lo[f].min(v);
                        hi[f] = hi[f].max(v);
                    }
                }
            }
        }
        let mut scales = Vec::with_capacity(c);
        for f in 0..c {
            let name = &cohort.feature_names[f];
            if !lo[f].is_finite() {
                return Err(Error::InvalidArgument(format!("feature `{name}` has no observed training values")));
            }
            scales.push(if f < N_VOLUMETRIC {
                if lo[f] == hi[f] {
                    return Err(Error::InvalidArgument(format!("feature `{name}` is constant (min = max)")));
                }
                FeatureScale::MinMax { min: lo[f], max: hi[f] }
            } else {
                if !(hi[f] > 0.0) {
                    return Err(Error::InvalidArgument(format!("feature `{name}` has non-positive maximum")));
                }
                FeatureScale::MaxDivide { max: hi[f] }
            });
        }
        Ok(Self { icv_mode, scales })
    }

    /// Scales one sequence and clips to `[0, 1]`; returns the clip count.
    pub fn apply(&self, seq: &Sequence) -> Result<(Sequence, usize)> {
        let div = icv_divisors(seq, self.icv_mode)?;
        let mut out = seq.clone();
        let mut clipped = 0;
        let c = seq.n_features();
        for i in 0..seq.len() {
            for f in 0..c {
                let v = seq.features.get(i, f);
                if !v.is_finite() {
                    continue;
                }
                let v = if f < N_VOLUMETRIC { v / div[i] } else { v };
                let mut s = self.scales[f].forward(v);
                if !s.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "subject {} visit {i} feature {f} after normalization",
                        seq.subject_id
                    )));
                }
                if !(0.0..=1.0).contains(&s) {
                    s = s.clamp(0.0, 1.0);
                    clipped += 1;
                }
                out.features.set(i, f, s);
            }
        }
        Ok((out, clipped))
    }

    /// Maps a normalized value back to raw units. `icv` is ignored for scores.
    pub fn invert(&self, feature: usize, v: f64, icv: f64) -> f64 {
        let u = self.scales[feature].inverse(v);
        if feature < N_VOLUMETRIC && self.icv_mode != IcvMode::None {
            u * icv
        } else {
            u
        }
    }

    /// ICV divisor that [`invert`](Self::invert) should use for visit `i`, or
    /// the most recent known value for visits past the end.
    pub fn icv_for(&self, seq: &Sequence, i: usize) -> f64 {
        match self.icv_mode {
            IcvMode::None => 1.0,
            IcvMode::Baseline => seq.icv.iter().copied().find(|v| v.is_finite()).unwrap_or(f64::NAN),
            IcvMode::PerVisit => {
                let upto = i.min(seq.icv.len().saturating_sub(1));
                match seq.icv.get(i) {
                    Some(v) if v.is_finite() => *v,
                    _ => seq.icv[..=upto].iter().rev().copied().find(|v| v.is_finite()).unwrap_or(f64::NAN),
                }
            }
        }
    }

    /// Normalizes the whole cohort with statistics from `train`.
    pub fn fit_apply(cohort: &Cohort, train: &[usize], icv_mode: IcvMode) -> Result<Cohort> {
        let norm = Self::fit(cohort, train, icv_mode)?;
        let mut out = cohort.clone();
        let mut clipped = 0;
        for (dst, src) in out.sequences.iter_mut().zip(&cohort.sequences) {
            let (s, n) = norm.apply(src)?;
            *dst = s;
            clipped += n;
        }
        if clipped > 0 {
            info!("clipped {clipped} normalized value(s) into [0, 1]");
        }
        out.normalization = Some(norm);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::FEATURE_NAMES;

    fn seq(id: &str, rows: &[[f64; 9]], icv: Vec<f64>) -> Sequence {
        let rows: Vec<Vec<f64>> = rows.iter().map(|r| r.to_vec()).collect();
        let times = (0..rows.len()).map(|i| 6.0 * i as f64).collect();
        Sequence::new(id, times, &rows, vec![None; rows.len()], icv).unwrap()
    }

    fn cohort() -> Cohort {
        let a = seq(
            "a",
            &[[2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 30.0, 5.0, 5.0], [4.0, 2.0, 2.0, 2.0, 2.0, 2.0, 24.0, 10.0, f64::NAN]],
            vec![],
        );
        let b = seq("b", &[[3.0, 1.5, 1.5, 1.5, 1.5, 1.5, 20.0, 20.0, 40.0]], vec![]);
        Cohort::new(vec![a, b])
    }

    #[test]
    fn min_max_and_max_divide() {
        let c = cohort();
        let norm = Normalization::fit(&c, &[0], IcvMode::None).unwrap();
        assert_eq!(norm.scales[0].forward(3.0), 0.5);
        assert_eq!(norm.scales[0].forward(2.0), 0.0);
        assert_eq!(norm.scales[6].forward(24.0), 0.8);
    }

    #[test]
    fn test_values_are_clipped() {
        let c = cohort();
        let norm = Normalization::fit(&c, &[1, 0], IcvMode::None).unwrap();
        let (_, n) = norm.apply(&c.sequences[1]).unwrap();
        assert_eq!(n, 0);
        let norm = Normalization::fit(&c, &[0], IcvMode::None).unwrap();
        let (s, n) = norm.apply(&c.sequences[1]).unwrap();
        // adas11 20 / 10 and adas13 40 / 5 exceed the training maximum
        assert_eq!(n, 2);
        assert_eq!(s.features.get(0, 7), 1.0);
    }

    #[test]
    fn constant_feature_is_named() {
        let c = Cohort::new(vec![seq("a", &[[1.0; 9], [1.0; 9]], vec![])]);
        let err = Normalization::fit(&c, &[0], IcvMode::None).unwrap_err();
        assert!(err.to_string().contains(FEATURE_NAMES[0]), "{err}");
    }

    #[test]
    fn icv_division_and_inverse() {
        let rows = [[2.0, 1.0, 1.0, 1.0, 1.0, 1.0, 30.0, 5.0, 5.0], [6.0, 3.0, 3.0, 3.0, 3.0, 3.0, 24.0, 10.0, 8.0]];
        let c = Cohort::new(vec![seq("a", &rows, vec![2.0, 4.0])]);
        let out = Normalization::fit_apply(&c, &[0], IcvMode::PerVisit).unwrap();
        let norm = out.normalization.clone().unwrap();
        assert!(matches!(norm.scales[1], FeatureScale::MinMax { min, max } if min == 0.5 && max == 0.75));
        let s = &out.sequences[0];
        for i in 0..2 {
            for f in 0..9 {
                let raw = c.sequences[0].features.get(i, f);
                let back = norm.invert(f, s.features.get(i, f), norm.icv_for(&c.sequences[0], i));
                assert!((back - raw).abs() < 1e-10, "visit {i} feature {f}");
            }
        }
    }
}
