//! Neural ODE for hidden-state evolution between visits.
//!
//! The state is the flattened lower triangle of `Log_I(H)`. Time given to
//! the vector field is in units of `time_unit_months` (years by default).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::{graph, CholeskyPoint, TangentVector};
use crate::tensor::{glorot_uniform, lower_len, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SolverMethod {
    Euler,
    Rk4,
    /// Per-step `H <- Exp_H(h f(Log_I H, t))` on the manifold.
    GeodesicEuler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub steps_per_unit: usize,
    pub time_unit_months: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Euler,
            steps_per_unit: 4,
            time_unit_months: 12.0,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_unit == 0 {
            return Err(Error::InvalidArgument("steps_per_unit must be at least 1".into()));
        }
        if !(self.time_unit_months > 0.0 && self.time_unit_months.is_finite()) {
            return Err(Error::InvalidArgument("time_unit_months must be positive".into()));
        }
        Ok(())
    }

    /// Number of fixed steps covering `span` normalized time units.
    pub fn steps_for(&self, span: f64) -> usize {
        ((self.steps_per_unit as f64 * span) - 1e-9).ceil().max(1.0) as usize
    }
}

/// `f(v, t) = W2 tanh(W1 v + w_t t + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorFieldParams {
    pub w1: ParamId,
    pub wt: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub dim: usize,
    pub hidden: usize,
}

impl VectorFieldParams {
    pub fn init(store: &mut ParamStore, dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let n = lower_len(dim);
        Self {
            w1: store.add("ode.w1", glorot_uniform(hidden, n, rng)),
            wt: store.add("ode.wt", glorot_uniform(hidden, 1, rng)),
            b1: store.add("ode.b1", Matrix::zeros(hidden, 1)),
            // Small output layer keeps the initial flow close to the identity.
            w2: store.add("ode.w2", glorot_uniform(n, hidden, rng).scale(0.1)),
            b2: store.add("ode.b2", Matrix::zeros(n, 1)),
            dim,
            hidden,
        }
    }

    /// Evaluates the field on a flattened `n x 1` state at normalized time `tau`.
    pub fn eval(&self, t: &mut Tape, store: &ParamStore, v: Var, tau: f64) -> Result<Var> {
        let w1 = t.param_of(store, self.w1);
        let wt = t.param_of(store, self.wt);
        let b1 = t.param_of(store, self.b1);
        let w2 = t.param_of(store, self.w2);
        let b2 = t.param_of(store, self.b2);
        let pre = t.matmul(w1, v)?;
        let time = t.scale(wt, tau);
        let pre = t.add(pre, time)?;
        let pre = t.add(pre, b1)?;
        let h = t.tanh(pre);
        let out = t.matmul(w2, h)?;
        t.add(out, b2)
    }
}

fn axpy(t: &mut Tape, y: Var, a: f64, x: Var) -> Result<Var> {
    let ax = t.scale(x, a);
    t.add(y, ax)
}

fn check_state(t: &Tape, v: Var, step: usize) -> Result<()> {
    if let Some(i) = t.value(v).first_non_finite() {
        return Err(Error::NonFinite(format!("ode state entry {i} at step {step}")));
    }
    Ok(())
}

/// Fixed-step integration of `dv/dt = field(v, t)` over `[t0, t1]` in
/// normalized units. `Euler` and `Rk4` only; the state may have any shape.
pub fn integrate<F>(t: &mut Tape, mut field: F, v0: Var, t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Var>
where
    F: FnMut(&mut Tape, Var, f64) -> Result<Var>,
{
    cfg.validate()?;
    if !(t1 >= t0) {
        return Err(Error::InvalidArgument(format!("time span [{t0}, {t1}] is reversed")));
    }
    if t1 == t0 {
        return Ok(v0);
    }
    let n = cfg.steps_for(t1 - t0);
    let h = (t1 - t0) / n as f64;
    let mut v = v0;
    for k in 0..n {
        let tk = t0 + k as f64 * h;
        v = match cfg.method {
            SolverMethod::Euler => {
                let f = field(t, v, tk)?;
                axpy(t, v, h, f)?
            }
            SolverMethod::Rk4 => {
                let k1 = field(t, v, tk)?;
                let y2 = axpy(t, v, h / 2.0, k1)?;
                let k2 = field(t, y2, tk + h / 2.0)?;
                let y3 = axpy(t, v, h / 2.0, k2)?;
                let k3 = field(t, y3, tk + h / 2.0)?;
                let y4 = axpy(t, v, h, k3)?;
                let k4 = field(t, y4, tk + h)?;
                let k23 = t.add(k2, k3)?;
                let s = axpy(t, k1, 2.0, k23)?;
                let s = t.add(s, k4)?;
                axpy(t, v, h / 6.0, s)?
            }
            SolverMethod::GeodesicEuler => {
                return Err(Error::InvalidArgument(
                    "geodesic-euler integrates manifold states; use evolve_hidden".into(),
                ))
            }
        };
        check_state(t, v, k)?;
    }
    Ok(v)
}

/// Tangent-space solve for a `d x d` lower-triangular `v0` over a span in months.
pub fn ode_solve_graph(
    t: &mut Tape,
    store: &ParamStore,
    field: &VectorFieldParams,
    v0: Var,
    span_months: (f64, f64),
    cfg: &SolverConfig,
) -> Result<Var> {
    let flat = t.flatten_lower(v0)?;
    let (t0, t1) = (span_months.0 / cfg.time_unit_months, span_months.1 / cfg.time_unit_months);
    let out = integrate(t, |t, v, tau| field.eval(t, store, v, tau), flat, t0, t1, cfg)?;
    if out == flat {
        return Ok(v0);
    }
    t.unflatten_lower(out, field.dim)
}

/// Evolves `h_prev` across a span in months. Returns `(H_evolved, H')` where
/// `H'` is the tangent at the identity consumed by the decoder.
pub fn evolve_hidden_graph(
    t: &mut Tape,
    store: &ParamStore,
    field: &VectorFieldParams,
    h_prev: Var,
    span_months: (f64, f64),
    cfg: &SolverConfig,
) -> Result<(Var, Var)> {
    match cfg.method {
        SolverMethod::Euler | SolverMethod::Rk4 => {
            let v0 = graph::log_at_identity(t, h_prev)?;
            let tangent = ode_solve_graph(t, store, field, v0, span_months, cfg)?;
            let h = graph::exp_at_identity(t, tangent);
            Ok((h, tangent))
        }
        SolverMethod::GeodesicEuler => {
            cfg.validate()?;
            let (t0, t1) = (span_months.0 / cfg.time_unit_months, span_months.1 / cfg.time_unit_months);
            if !(t1 >= t0) {
                return Err(Error::InvalidArgument(format!("time span [{t0}, {t1}] is reversed")));
            }
            let mut h = h_prev;
            if t1 > t0 {
                let n = cfg.steps_for(t1 - t0);
                let step = (t1 - t0) / n as f64;
                for k in 0..n {
                    let v = graph::log_at_identity(t, h)?;
                    let flat = t.flatten_lower(v)?;
                    let f = field.eval(t, store, flat, t0 + k as f64 * step)?;
                    let f = t.scale(f, step);
                    let dir = t.unflatten_lower(f, field.dim)?;
                    h = graph::exp_map(t, h, dir)?;
                    check_state(t, h, k)?;
                }
            }
            let tangent = graph::log_at_identity(t, h)?;
            Ok((h, tangent))
        }
    }
}

/// Value-level tangent-space solve.
pub fn ode_solve(
    field: &VectorFieldParams,
    store: &ParamStore,
    v0: &TangentVector,
    span_months: (f64, f64),
    cfg: &SolverConfig,
) -> Result<TangentVector> {
    let mut t = Tape::inference();
    let v = t.constant(v0.as_matrix().clone());
    let out = ode_solve_graph(&mut t, store, field, v, span_months, cfg)?;
    TangentVector::new(t.value(out).clone())
}

/// Value-level [`evolve_hidden_graph`].
pub fn evolve_hidden(
    h_prev: &CholeskyPoint,
    span_months: (f64, f64),
    field: &VectorFieldParams,
    store: &ParamStore,
    cfg: &SolverConfig,
) -> Result<(CholeskyPoint, TangentVector)> {
    let mut t = Tape::inference();
    let h = t.constant(h_prev.as_matrix().clone());
    let (h, v) = evolve_hidden_graph(&mut t, store, field, h, span_months, cfg)?;
    Ok((CholeskyPoint::new(t.value(h).clone())?, TangentVector::new(t.value(v).clone())?))
}
