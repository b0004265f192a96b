//! Longitudinal cohorts: sequences, CSV I/O, normalization, folds and a
//! synthetic generator.

mod csv_io;
mod folds;
mod normalize;
mod synth;

pub use csv_io::{load_csv, read_csv, write_csv, write_csv_to, LabelMap, LoadOptions};
pub use folds::{regularize_yearly, split_folds, Fold};
pub use normalize::{FeatureScale, IcvMode, Normalization};
pub use synth::{generate_synthetic, Schedule, SynthConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Feature columns in file and model order.
pub const FEATURE_NAMES: [&str; 9] = [
    "entorhinal",
    "hippocampus",
    "fusiform",
    "midtemporal",
    "ventricles",
    "wholebrain",
    "mmse",
    "adas11",
    "adas13",
];

/// The first six features are volumes; the rest are cognitive scores.
pub const N_VOLUMETRIC: usize = 6;

/// Expected long-run trend of each feature under disease progression.
pub const TREND_DIRECTION: [f64; 9] = [-1.0, -1.0, -1.0, -1.0, 1.0, -1.0, -1.0, 1.0, 1.0];

pub const CLASS_NAMES: [&str; 3] = ["CN", "MCI", "AD"];

/// Index range of the cognitive scores in [`FEATURE_NAMES`].
pub fn score_indices() -> std::ops::Range<usize> {
    N_VOLUMETRIC..FEATURE_NAMES.len()
}

/// One subject's visits. Unobserved entries are NaN and `mask` is 1 exactly
/// where `features` is finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sequence {
    pub subject_id: String,
    /// Months since the first visit; strictly increasing, `times[0] == 0`.
    pub times: Vec<f64>,
    pub features: Matrix,
    pub mask: Matrix,
    pub labels: Vec<Option<usize>>,
    /// Per-visit intracranial volume, NaN when unknown. Empty when the source has none.
    pub icv: Vec<f64>,
}

impl Sequence {
    /// Builds a sequence from raw rows; non-finite values become missing.
    pub fn new(
        subject_id: impl Into<String>,
        times: Vec<f64>,
        rows: &[Vec<f64>],
        labels: Vec<Option<usize>>,
        icv: Vec<f64>,
    ) -> Result<Self> {
        let subject_id = subject_id.into();
        let t = times.len();
        if t == 0 {
            return Err(Error::Empty("sequence visits"));
        }
        if rows.len() != t || labels.len() != t || !(icv.is_empty() || icv.len() == t) {
            return Err(Error::InvalidArgument(format!(
                "subject {subject_id}: {t} times, {} feature rows, {} labels, {} icv values",
                rows.len(),
                labels.len(),
                icv.len()
            )));
        }
        let c = rows[0].len();
        let mut data = Vec::with_capacity(t * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::InvalidArgument(format!("subject {subject_id}: ragged feature rows")));
            }
            data.extend(row.iter().map(|&v| if v.is_finite() { v } else { f64::NAN }));
        }
        let features = Matrix::from_vec(t, c, data)?;
        let mask = features.map(|v| if v.is_finite() { 1.0 } else { 0.0 });
        let seq = Self {
            subject_id,
            times,
            features,
            mask,
            labels,
            icv,
        };
        seq.validate()?;
        Ok(seq)
    }

    pub fn validate(&self) -> Result<()> {
        let id = &self.subject_id;
        if self.times.is_empty() {
            return Err(Error::Empty("sequence visits"));
        }
        if self.times[0] != 0.0 {
            return Err(Error::InvalidArgument(format!("subject {id}: first visit is not at month 0")));
        }
        if let Some(i) = (1..self.times.len()).find(|&i| !(self.times[i] > self.times[i - 1])) {
            return Err(Error::InvalidArgument(format!(
                "subject {id}: visit {i} time {} does not increase",
                self.times[i]
            )));
        }
        for (k, (&v, &m)) in self.features.data().iter().zip(self.mask.data()).enumerate() {
            if (m == 1.0) != v.is_finite() || !(m == 0.0 || m == 1.0) {
                return Err(Error::InvalidArgument(format!(
                    "subject {id}: mask disagrees with value at visit {}, feature {}",
                    k / self.features.cols(),
                    k % self.features.cols()
                )));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn visit(&self, i: usize) -> &[f64] {
        self.features.row(i)
    }

    pub fn visit_mask(&self, i: usize) -> &[f64] {
        self.mask.row(i)
    }

    pub fn is_fully_observed(&self, i: usize) -> bool {
        self.visit_mask(i).iter().all(|&m| m == 1.0)
    }

    /// Latest known label, used for stratification.
    pub fn last_label(&self) -> Option<usize> {
        self.labels.iter().rev().find_map(|l| *l)
    }

    /// Labels with the last known value carried forward into unlabeled visits.
    pub fn carried_labels(&self) -> Vec<Option<usize>> {
        let mut last = None;
        self.labels
            .iter()
            .map(|l| {
                if l.is_some() {
                    last = *l;
                }
                last
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub sequences: Vec<Sequence>,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub normalization: Option<Normalization>,
}

impl Cohort {
    pub fn new(sequences: Vec<Sequence>) -> Self {
        Self {
            sequences,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            normalization: None,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn has_icv(&self) -> bool {
        self.sequences.iter().any(|s| !s.icv.is_empty())
    }

    pub fn subset(&self, idx: &[usize]) -> Cohort {
        Cohort {
            sequences: idx.iter().map(|&i| self.sequences[i].clone()).collect(),
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            normalization: self.normalization.clone(),
        }
    }

    /// Fraction of feature entries that are unobserved.
    pub fn missing_fraction(&self) -> f64 {
        let (miss, total) = self.sequences.iter().fold((0.0, 0usize), |(m, n), s| {
            (m + s.mask.data().iter().filter(|&&v| v == 0.0).count() as f64, n + s.mask.len())
        });
        if total == 0 {
            0.0
        } else {
            miss / total as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_follows_finiteness() {
        let s = Sequence::new(
            "a",
            vec![0.0, 6.0],
            &[vec![1.0, f64::NAN], vec![f64::INFINITY, 2.0]],
            vec![Some(0), None],
            vec![],
        )
        .unwrap();
        assert_eq!(s.mask, Matrix::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]));
        assert!(s.features.get(1, 0).is_nan());
    }

    #[test]
    fn rejects_non_increasing_times() {
        let rows = vec![vec![1.0]; 3];
        let err = Sequence::new("a", vec![0.0, 6.0, 6.0], &rows, vec![None; 3], vec![]).unwrap_err();
        assert!(err.to_string().contains("visit 2"), "{err}");
        assert!(Sequence::new("a", vec![3.0, 6.0, 9.0], &rows, vec![None; 3], vec![]).is_err());
    }

    #[test]
    fn labels_carry_forward() {
        let rows = vec![vec![1.0]; 4];
        let s = Sequence::new("a", vec![0.0, 1.0, 2.0, 3.0], &rows, vec![None, Some(0), None, Some(1)], vec![])
            .unwrap();
        assert_eq!(s.carried_labels(), vec![None, Some(0), Some(0), Some(1)]);
        assert_eq!(s.last_label(), Some(1));
    }
}
