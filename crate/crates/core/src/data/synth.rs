//! Synthetic disease-progression cohort.
//!
//! Each subject has a latent severity `sigma(t) = sigma0 + rate * years`.
//! Labels are thresholds on severity (CN < 1 <= MCI < 2 <= AD), so they never
//! revert. Features are logistic functions of severity in raw units with
//! Gaussian observation noise; volumes scale with the subject's ICV.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{Cohort, Sequence, TREND_DIRECTION};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Schedule {
    Regular { interval_months: f64 },
    /// Visit `k` at `k * interval + U(-jitter, jitter)` months (baseline unjittered).
    Irregular { interval_months: f64, jitter_months: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_subjects: usize,
    pub n_visits: usize,
    pub schedule: Schedule,
    /// Expected fraction of missing feature entries.
    pub missing_rate: f64,
    /// Share of `missing_rate` realized as whole-visit dropout.
    pub visit_dropout_share: f64,
    /// Baseline class proportions (CN, MCI, AD).
    pub class_mix: [f64; 3],
    /// Mean severity progression per year for each baseline class.
    pub class_rates: [f64; 3],
    /// Observation noise as a fraction of each feature's dynamic range.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_subjects: 300,
            n_visits: 10,
            schedule: Schedule::Irregular {
                interval_months: 6.0,
                jitter_months: 1.5,
            },
            missing_rate: 0.3,
            visit_dropout_share: 0.1,
            class_mix: [0.35, 0.40, 0.25],
            class_rates: [0.06, 0.22, 0.30],
            noise: 0.03,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.n_subjects == 0 {
            return bad("n_subjects must be positive");
        }
        if self.n_visits == 0 {
            return bad("n_visits must be positive");
        }
        if !(0.0..=1.0).contains(&self.missing_rate) || !(0.0..=1.0).contains(&self.visit_dropout_share) {
            return bad("missing_rate and visit_dropout_share must lie in [0, 1]");
        }
        if self.missing_rate >= 1.0 {
            return bad("missing_rate must be below 1");
        }
        if self.class_mix.iter().any(|&p| !(p >= 0.0)) || self.class_mix.iter().sum::<f64>() <= 0.0 {
            return bad("class_mix must be non-negative with a positive sum");
        }
        if self.class_rates.iter().any(|&r| !(r >= 0.0)) {
            return bad("class_rates must be non-negative");
        }
        if !(self.noise >= 0.0) {
            return bad("noise must be non-negative");
        }
        match self.schedule {
            Schedule::Regular { interval_months } if !(interval_months > 0.0) => bad("interval must be positive"),
            Schedule::Irregular {
                interval_months,
                jitter_months,
            } if !(interval_months > 0.0) || !(jitter_months >= 0.0) || 2.0 * jitter_months >= interval_months => {
                bad("irregular schedule needs interval > 2 * jitter >= 0")
            }
            _ => Ok(()),
        }
    }
}

/// Feature shape: value = base + span * direction * logistic((sigma - mid) * slope).
/// Volumes are fractions of ICV; scores are in raw points.
struct FeatureModel {
    base: f64,
    span: f64,
    mid: f64,
    slope: f64,
    /// Between-subject spread of `base`, as a fraction of `span`.
    spread: f64,
}

const FEATURE_MODELS: [FeatureModel; 9] = [
    FeatureModel { base: 2.6e-3, span: 0.9e-3, mid: 1.3, slope: 1.6, spread: 0.25 },
    FeatureModel { base: 5.0e-3, span: 1.6e-3, mid: 1.2, slope: 1.6, spread: 0.25 },
    FeatureModel { base: 1.25e-2, span: 2.4e-3, mid: 1.5, slope: 1.4, spread: 0.3 },
    FeatureModel { base: 1.35e-2, span: 2.8e-3, mid: 1.5, slope: 1.4, spread: 0.3 },
    FeatureModel { base: 2.0e-2, span: 2.4e-2, mid: 1.6, slope: 1.3, spread: 0.2 },
    FeatureModel { base: 0.70, span: 0.07, mid: 1.5, slope: 1.3, spread: 0.3 },
    FeatureModel { base: 29.0, span: 16.0, mid: 2.0, slope: 1.5, spread: 0.04 },
    FeatureModel { base: 7.0, span: 26.0, mid: 2.0, slope: 1.5, spread: 0.04 },
    FeatureModel { base: 11.0, span: 36.0, mid: 2.0, slope: 1.5, spread: 0.04 },
];

/// Valid ranges of MMSE, ADAS-Cog 11 and ADAS-Cog 13.
const SCORE_RANGES: [(f64, f64); 3] = [(0.0, 30.0), (0.0, 70.0), (0.0, 85.0)];

fn clamp_score(f: usize, v: f64) -> f64 {
    match f.checked_sub(super::N_VOLUMETRIC) {
        Some(k) => v.clamp(SCORE_RANGES[k].0, SCORE_RANGES[k].1),
        None => v,
    }
}

const SEVERITY_BANDS: [(f64, f64); 3] = [(0.0, 0.85), (1.0, 1.85), (2.0, 2.7)];

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn severity_label(sigma: f64) -> usize {
    if sigma < 1.0 {
        0
    } else if sigma < 2.0 {
        1
    } else {
        2
    }
}

fn pick_class(mix: &[f64; 3], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = mix.iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (k, &p) in mix.iter().enumerate() {
        if u < p {
            return k;
        }
        u -= p;
    }
    2
}

/// Generates a cohort deterministically from `cfg.seed`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Cohort> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let p_visit = cfg.missing_rate * cfg.visit_dropout_share;
    let p_entry = if p_visit < 1.0 {
        (cfg.missing_rate - p_visit) / (1.0 - p_visit)
    } else {
        0.0
    };
    let width = (cfg.n_subjects.max(1) as f64).log10().floor() as usize + 1;

    let mut sequences = Vec::with_capacity(cfg.n_subjects);
    for n in 0..cfg.n_subjects {
        let class = pick_class(&cfg.class_mix, &mut rng);
        let (lo, hi) = SEVERITY_BANDS[class];
        let sigma0 = rng.gen_range(lo..hi);
        let rate = cfg.class_rates[class] * rng.gen_range(0.5..1.5);
        let icv = 1.5e6 * (1.0 + 0.08 * std_normal.sample(&mut rng));
        let offsets: Vec<f64> = FEATURE_MODELS
            .iter()
            .map(|m| m.spread * m.span * std_normal.sample(&mut rng))
            .collect();

        let mut times = Vec::with_capacity(cfg.n_visits);
        for k in 0..cfg.n_visits {
            let t = match cfg.schedule {
                Schedule::Regular { interval_months } => k as f64 * interval_months,
                Schedule::Irregular {
                    interval_months,
                    jitter_months,
                } => {
                    let j = if k == 0 || jitter_months == 0.0 {
                        0.0
                    } else {
                        rng.gen_range(-jitter_months..jitter_months)
                    };
                    k as f64 * interval_months + j
                }
            };
            times.push(t);
        }

        let mut rows = Vec::with_capacity(cfg.n_visits);
        let mut labels = Vec::with_capacity(cfg.n_visits);
        let mut icvs = Vec::with_capacity(cfg.n_visits);
        for (k, &t) in times.iter().enumerate() {
            let sigma = sigma0 + rate * t / 12.0;
            let dropped = k > 0 && p_visit > 0.0 && rng.gen_bool(p_visit);
            let mut row = Vec::with_capacity(FEATURE_MODELS.len());
            for (f, m) in FEATURE_MODELS.iter().enumerate() {
                let clean = m.base + offsets[f] + m.span * TREND_DIRECTION[f] * logistic((sigma - m.mid) * m.slope);
                let noisy = clean + cfg.noise * m.span * std_normal.sample(&mut rng);
                let value = if f < super::N_VOLUMETRIC { noisy * icv } else { clamp_score(f, noisy) };
                let missing = dropped || (p_entry > 0.0 && rng.gen_bool(p_entry));
                row.push(if missing { f64::NAN } else { value });
            }
            rows.push(row);
            labels.push(if dropped { None } else { Some(severity_label(sigma)) });
            icvs.push(if dropped { f64::NAN } else { icv });
        }
        // Baseline keeps at least one observed entry.
        if rows[0].iter().all(|v| v.is_nan()) {
            let m = &FEATURE_MODELS[6];
            rows[0][6] = clamp_score(6, m.base + offsets[6] - m.span * logistic((sigma0 - m.mid) * m.slope));
        }
        sequences.push(Sequence::new(format!("S{n:0width$}"), times, &rows, labels, icvs)?);
    }
    Ok(Cohort::new(sequences))
}
