//! Shared test oracles.
#![allow(dead_code)]

use cholseq::tensor::{Matrix, ParamStore, Tape, Var};
use cholseq::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_REL_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Random lower-triangular matrix with diagonal in `[lo, hi]`.
pub fn random_point(d: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            m.set(i, j, rng.gen_range(-1.0..1.0));
        }
        m.set(i, i, rng.gen_range(lo..hi));
    }
    m
}

pub fn random_tangent(d: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let mut m = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            m.set(i, j, rng.gen_range(-scale..scale));
        }
    }
    m
}

/// Random SPD matrix `B B^T + d I`.
pub fn random_spd(d: usize, rng: &mut impl Rng) -> Matrix {
    let b = random_matrix(d, d, 1.0, rng);
    let mut c = b.matmul(&b.transpose()).unwrap();
    for i in 0..d {
        c[(i, i)] += 0.5;
        for j in 0..i {
            let v = c.get(i, j);
            c.set(j, i, v);
        }
    }
    c
}

#[derive(Debug)]
pub struct GradCheck {
    pub max_rel_err: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

impl GradCheck {
    pub fn assert_ok(&self) {
        assert!(
            self.max_rel_err < FD_REL_TOL,
            "gradient check failed: {:?}",
            self
        );
    }
}

/// Central finite differences of a scalar-valued graph against the tape's
/// reverse pass, over every entry of every parameter in `store`.
///
/// Relative error per entry is `|analytic - numeric| / (|numeric| + 1e-8)`.
pub fn check_gradients<F>(store: &ParamStore, f: F) -> GradCheck
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut analytic = store.clone();
    analytic.zero_grads();
    {
        let mut t = Tape::new();
        let root = f(&mut t, &analytic).expect("forward");
        t.backward(root).expect("backward").accumulate_into(&mut analytic);
    }
    let eval = |s: &ParamStore| -> f64 {
        let mut t = Tape::inference();
        let root = f(&mut t, s).expect("forward");
        t.scalar(root)
    };
    let mut probe = store.clone();
    let mut report = GradCheck {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
    };
    let ids: Vec<_> = store.iter().map(|p| p.id).collect();
    for id in ids {
        for k in 0..store.get(id).value.len() {
            let x0 = store.get(id).value.data()[k];
            probe.value_mut(id).data_mut()[k] = x0 + FD_STEP;
            let up = eval(&probe);
            probe.value_mut(id).data_mut()[k] = x0 - FD_STEP;
            let down = eval(&probe);
            probe.value_mut(id).data_mut()[k] = x0;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.get(id).grad.data()[k];
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-8);
            report.checked += 1;
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((store.get(id).name.clone(), k, a, numeric));
            }
        }
    }
    report
}

/// `sum(out ⊙ R)` for a fixed random `R`, so every output entry matters.
pub fn project(t: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let (r, c) = t.shape(out);
    let w = random_matrix(r, c, 1.0, &mut rng(seed));
    let wv = t.constant(w);
    let p = t.mul(out, wv)?;
    Ok(t.sum(p))
}

/// Log-Cholesky exponential map written out directly from the metric.
fn oracle_exp(base: &Matrix, x: &Matrix) -> Matrix {
    let d = base.rows();
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            out.set(i, j, base.get(i, j) + x.get(i, j));
        }
        out.set(i, i, base.get(i, i) * (x.get(i, i) / base.get(i, i)).exp());
    }
    out
}

fn oracle_log(base: &Matrix, target: &Matrix) -> Matrix {
    let d = base.rows();
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..i {
            out.set(i, j, target.get(i, j) - base.get(i, j));
        }
        out.set(i, i, base.get(i, i) * (target.get(i, i) / base.get(i, i)).ln());
    }
    out
}

/// Karcher flow: step size 1, at most 100 iterations, stops once the norm of
/// the mean tangent (in the metric at the iterate) drops below 1e-10.
pub fn karcher_mean(points: &[Matrix]) -> Matrix {
    let d = points[0].rows();
    let mut mu = points[0].clone();
    for _ in 0..100 {
        let mut mean = Matrix::zeros(d, d);
        for p in points {
            let v = oracle_log(&mu, p);
            for (m, x) in mean.data_mut().iter_mut().zip(v.data()) {
                *m += x / points.len() as f64;
            }
        }
        let mut norm2 = 0.0;
        for i in 0..d {
            for j in 0..i {
                norm2 += mean.get(i, j).powi(2);
            }
            norm2 += (mean.get(i, i) / mu.get(i, i)).powi(2);
        }
        mu = oracle_exp(&mu, &mean);
        if norm2.sqrt() < 1e-10 {
            break;
        }
    }
    mu
}

/// Hand and Till mAUC by explicit comparison of every cross-class pair.
pub fn brute_force_mauc(probs: &[Vec<f64>], labels: &[usize], k: usize) -> f64 {
    let a = |i: usize, j: usize| {
        let mut score = 0.0;
        let mut pairs = 0.0;
        for (p, &lp) in probs.iter().zip(labels) {
            if lp != i {
                continue;
            }
            for (q, &lq) in probs.iter().zip(labels) {
                if lq != j {
                    continue;
                }
                pairs += 1.0;
                if p[i] > q[i] {
                    score += 1.0;
                } else if p[i] == q[i] {
                    score += 0.5;
                }
            }
        }
        score / pairs
    };
    let mut total = 0.0;
    let mut n = 0;
    for i in 0..k {
        for j in i + 1..k {
            if labels.contains(&i) && labels.contains(&j) {
                total += (a(i, j) + a(j, i)) / 2.0;
                n += 1;
            }
        }
    }
    total / n as f64
}

/// Area under the ROC curve of `scores` for positives `labels[n] == 1`,
/// integrating the tie-grouped curve with the trapezoid rule.
pub fn trapezoid_auc(scores: &[f64], labels: &[usize]) -> f64 {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    let (mut tp, mut fp, mut area) = (0.0, 0.0, 0.0);
    let mut k = 0;
    while k < order.len() {
        let (tp0, fp0) = (tp, fp);
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            k += 1;
        }
        area += (fp - fp0) / neg * (tp + tp0) / (2.0 * pos);
    }
    area
}
