use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Cohort, Sequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Subject-level `k`-fold split stratified by each subject's last label.
/// Subjects are shuffled within their stratum and dealt round-robin.
pub fn split_folds(cohort: &Cohort, k: usize, seed: u64) -> Result<Vec<Fold>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 folds, got {k}")));
    }
    let n = cohort.len();
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} subjects cannot fill {k} folds")));
    }
    let n_strata = cohort.class_names.len() + 1;
    let mut strata: Vec<Vec<usize>> = vec![Vec::new(); n_strata];
    for (i, s) in cohort.sequences.iter().enumerate() {
        strata[s.last_label().unwrap_or(n_strata - 1).min(n_strata - 1)].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut slot = 0;
    for stratum in &mut strata {
        stratum.shuffle(&mut rng);
        for &i in stratum.iter() {
            members[slot % k].push(i);
            slot += 1;
        }
    }
    Ok((0..k)
        .map(|f| {
            let mut val = members[f].clone();
            val.sort_unstable();
            let mut train: Vec<usize> = (0..k).filter(|&g| g != f).flat_map(|g| members[g].iter().copied()).collect();
            train.sort_unstable();
            Fold { train, val }
        })
        .collect())
}

/// Keeps the visit closest to each 12-month mark (within 6 months) and snaps
/// its time to the mark.
pub fn regularize_yearly(seq: &Sequence) -> Sequence {
    let last = *seq.times.last().expect("non-empty sequence");
    let mut picked: Vec<(usize, f64)> = Vec::new();
    let mut year = 0usize;
    while 12.0 * year as f64 <= last + 6.0 {
        let mark = 12.0 * year as f64;
        let best = seq
            .times
            .iter()
            .enumerate()
            .filter(|(_, &t)| (t - mark).abs() < 6.0)
            .min_by(|a, b| (a.1 - mark).abs().total_cmp(&(b.1 - mark).abs()));
        if let Some((i, _)) = best {
            if picked.last().map_or(true, |&(j, _)| j != i) {
                picked.push((i, mark));
            }
        }
        year += 1;
    }
    let c = seq.n_features();
    let mut features = crate::tensor::Matrix::zeros(picked.len(), c);
    let mut mask = crate::tensor::Matrix::zeros(picked.len(), c);
    for (r, &(i, _)) in picked.iter().enumerate() {
        for f in 0..c {
            features.set(r, f, seq.features.get(i, f));
            mask.set(r, f, seq.mask.get(i, f));
        }
    }
    Sequence {
        subject_id: seq.subject_id.clone(),
        times: picked.iter().map(|&(_, t)| t).collect(),
        features,
        mask,
        labels: picked.iter().map(|&(i, _)| seq.labels[i]).collect(),
        icv: if seq.icv.is_empty() {
            Vec::new()
        } else {
            picked.iter().map(|&(i, _)| seq.icv[i]).collect()
        },
    }
}
