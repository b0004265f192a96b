//! Fold-level training and evaluation. Each fold is an independent replica:
//! normalization is fitted on its training subjects only and its seeds are
//! derived from the run seed and the fold index.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{evaluate, train, ModelConfig, ModelParams, TrainConfig, TrainReport};
use crate::data::{Cohort, Fold, IcvMode, Normalization, Sequence};
use crate::error::{Error, Result};
use crate::metrics::EvalReport;

/// Environment variable capping how many folds train at once.
pub const THREADS_ENV: &str = "CHOLSEQ_THREADS";

/// Everything a fold run depends on besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub icv_mode: IcvMode,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub params: ModelParams,
    pub normalization: Normalization,
    pub train_report: TrainReport,
    pub val_report: EvalReport,
    /// Normalized validation sequences, for further evaluation.
    pub val: Vec<Sequence>,
}

/// Seed of fold `k`; fold `k` of a run never depends on how many folds run
/// alongside it.
pub fn fold_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(k as u64 + 1)
}

/// Normalizes `idx` of `cohort` with `norm`.
pub fn normalized(cohort: &Cohort, idx: &[usize], norm: &Normalization) -> Result<Vec<Sequence>> {
    idx.iter().map(|&i| Ok(norm.apply(&cohort.sequences[i])?.0)).collect()
}

/// Trains on the fold's training subjects and evaluates on its validation
/// subjects. `raw` is the unnormalized cohort.
pub fn train_fold(raw: &Cohort, fold: &Fold, k: usize, spec: &RunSpec) -> Result<FoldOutcome> {
    let normalization = Normalization::fit(raw, &fold.train, spec.icv_mode)?;
    let train_seqs = normalized(raw, &fold.train, &normalization)?;
    let val = normalized(raw, &fold.val, &normalization)?;
    let seed = fold_seed(spec.seed, k);
    let mut params = ModelParams::init(spec.model.clone(), seed)?;
    let cfg = TrainConfig {
        seed,
        ..spec.train.clone()
    };
    let train_report = train(&mut params, &train_seqs, &cfg, |s| {
        log::debug!("fold {k} epoch {}: total {:.6}", s.epoch, s.total)
    })?;
    let val_report = evaluate(&params, &val, Some(&normalization))?;
    log::info!("fold {k}: validation mAUC {:.4}", val_report.mauc);
    Ok(FoldOutcome {
        fold: k,
        params,
        normalization,
        train_report,
        val_report,
        val,
    })
}

/// Thread cap from [`THREADS_ENV`], else the available parallelism.
pub fn thread_limit() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::InvalidArgument(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)),
    }
}

/// Runs `f` over `0..n` on at most `threads` threads. Results come back in
/// index order; the first error (by index) wins.
pub fn parallel_map<T: Send>(n: usize, threads: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let next = Mutex::new(0usize);
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let i = {
                    let mut g = next.lock().expect("work queue poisoned");
                    let i = *g;
                    *g += 1;
                    i
                };
                if i >= n {
                    break;
                }
                let r = f(i);
                *slots[i].lock().expect("result slot poisoned") = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().expect("result slot poisoned").expect("every index ran"))
        .collect()
}

/// Trains every fold, in parallel up to `threads`.
pub fn run_folds(raw: &Cohort, folds: &[Fold], spec: &RunSpec, threads: usize) -> Result<Vec<FoldOutcome>> {
    parallel_map(folds.len(), threads, |k| train_fold(raw, &folds[k], k, spec))
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
