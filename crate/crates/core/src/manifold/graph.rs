//! Tape-recorded versions of the Cholesky-space maps.
//!
//! Inputs are assumed to satisfy the point/tangent invariants; domain
//! violations on a diagonal surface as [`Error::Domain`] from `diag_log`.

use super::WfmNormalization;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Var};

/// `Exp_L(X)` at an arbitrary base.
pub fn exp_map(t: &mut Tape, base: Var, x: Var) -> Result<Var> {
    let lower = {
        let lb = t.strict_tril(base);
        let lx = t.strict_tril(x);
        t.add(lb, lx)?
    };
    // D(X) D(L)^-1 via exp(-log D(L)); off-diagonal ones are masked by D(X).
    let log_dl = t.diag_log(base)?;
    let neg = t.scale(log_dl, -1.0);
    let inv_dl = t.exp(neg);
    let dx = t.diag_part(x);
    let ratio = t.mul(dx, inv_dl)?;
    let e = t.diag_exp(ratio);
    let dl = t.diag_part(base);
    let diag = t.mul(dl, e)?;
    t.add(lower, diag)
}

/// `Log_X(L)` at an arbitrary base.
pub fn log_map(t: &mut Tape, base: Var, target: Var) -> Result<Var> {
    let lt = t.strict_tril(target);
    let lb = t.strict_tril(base);
    let lower = t.sub(lt, lb)?;
    let log_l = t.diag_log(target)?;
    let log_x = t.diag_log(base)?;
    let diff = t.sub(log_l, log_x)?;
    let dx = t.diag_part(base);
    let diag = t.mul(dx, diff)?;
    t.add(lower, diag)
}

/// `Exp_I(V) = ⌊V⌋ + exp(D(V))`.
pub fn exp_at_identity(t: &mut Tape, v: Var) -> Var {
    let lower = t.strict_tril(v);
    let diag = t.diag_exp(v);
    t.add(lower, diag).expect("same shape")
}

/// `Log_I(H) = ⌊H⌋ + log D(H)`.
pub fn log_at_identity(t: &mut Tape, h: Var) -> Result<Var> {
    let lower = t.strict_tril(h);
    let diag = t.diag_log(h)?;
    t.add(lower, diag)
}

/// Weighted Fréchet mean with 1x1 weight nodes.
pub fn weighted_frechet_mean(
    t: &mut Tape,
    points: &[Var],
    weights: &[Var],
    norm: WfmNormalization,
) -> Result<Var> {
    if points.is_empty() {
        return Err(Error::Empty("weighted_frechet_mean points"));
    }
    if points.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    let mut lower_sum = None;
    let mut log_sum = None;
    for (&p, &w) in points.iter().zip(weights) {
        let lower = t.strict_tril(p);
        let wl = t.mul_scalar(lower, w)?;
        let logd = t.diag_log(p)?;
        let wd = t.mul_scalar(logd, w)?;
        lower_sum = Some(match lower_sum {
            Some(acc) => t.add(acc, wl)?,
            None => wl,
        });
        log_sum = Some(match log_sum {
            Some(acc) => t.add(acc, wd)?,
            None => wd,
        });
    }
    let (lower_sum, log_sum) = (lower_sum.unwrap(), log_sum.unwrap());
    let (lower_mean, log_mean) = match norm {
        WfmNormalization::Count => {
            let inv = 1.0 / points.len() as f64;
            (t.scale(lower_sum, inv), t.scale(log_sum, inv))
        }
        WfmNormalization::WeightSum => {
            let mut total = weights[0];
            for &w in &weights[1..] {
                total = t.add(total, w)?;
            }
            let log_total = t.log(total)?;
            let neg = t.scale(log_total, -1.0);
            let inv = t.exp(neg);
            (t.mul_scalar(lower_sum, inv)?, t.mul_scalar(log_sum, inv)?)
        }
    };
    let diag = t.diag_exp(log_mean);
    t.add(lower_mean, diag)
}

/// `X ⊕ Y`.
pub fn bias_add(t: &mut Tape, x: Var, y: Var) -> Result<Var> {
    let lx = t.strict_tril(x);
    let ly = t.strict_tril(y);
    let lower = t.add(lx, ly)?;
    let dx = t.diag_part(x);
    let dy = t.diag_part(y);
    let diag = t.mul(dx, dy)?;
    t.add(lower, diag)
}

/// `(1 - z) ⊙ a + z ⊙ b`.
pub fn gate_combine(t: &mut Tape, z: Var, a: Var, b: Var) -> Result<Var> {
    let keep = t.one_minus(z);
    let ka = t.mul(keep, a)?;
    let zb = t.mul(z, b)?;
    let out = t.add(ka, zb)?;
    // The (1 - z) factor is 1 above the diagonal; re-zero that region exactly.
    Ok(t.tril(out))
}
