//! Riemannian GRU cell on lower-triangular Cholesky factors.

use rand::Rng;

use crate::error::{Error, Result};
use crate::manifold::{graph, CholeskyPoint, WfmNormalization, DIAG_FLOOR};
use crate::tensor::{Matrix, ParamId, ParamStore, Tape, Var};

/// `softplus(RAW_UNIT_WEIGHT) == 1`.
pub const RAW_UNIT_WEIGHT: f64 = 0.541_324_854_612_918_1;

/// Gate parameters: a raw 1x2 wFM weight row (mapped through softplus) and a
/// raw bias whose strict lower part is used directly and whose diagonal is
/// the log of the bias diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateParams {
    pub weights: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RgruParams {
    pub z: GateParams,
    pub r: GateParams,
    pub l: GateParams,
    pub dim: usize,
    pub norm: WfmNormalization,
}

impl RgruParams {
    pub fn init(store: &mut ParamStore, dim: usize, norm: WfmNormalization, rng: &mut impl Rng) -> Self {
        let mut gate = |name: &str, store: &mut ParamStore| {
            let weights = Matrix::from_vec(
                1,
                2,
                (0..2).map(|_| RAW_UNIT_WEIGHT + rng.gen_range(-0.05..0.05)).collect(),
            )
            .expect("1x2");
            let mut bias = Matrix::zeros(dim, dim);
            for i in 0..dim {
                for j in 0..i {
                    bias.set(i, j, rng.gen_range(-0.05..0.05));
                }
            }
            GateParams {
                weights: store.add(format!("rgru.{name}.w"), weights),
                bias: store.add(format!("rgru.{name}.b"), bias),
            }
        };
        let z = gate("z", store);
        let r = gate("r", store);
        let l = gate("l", store);
        Self { z, r, l, dim, norm }
    }

    /// One cell update `H_i = RGRU(X_i, H_{i-1})`.
    pub fn step(&self, t: &mut Tape, store: &ParamStore, x: Var, h_prev: Var) -> Result<Var> {
        for v in [x, h_prev] {
            if t.shape(v) != (self.dim, self.dim) {
                return Err(Error::ShapeMismatch {
                    op: "rgru_step",
                    left: t.shape(v),
                    right: (self.dim, self.dim),
                });
            }
        }
        let z = self.gate(t, store, self.z, x, h_prev)?;
        let r = self.gate(t, store, self.r, x, h_prev)?;
        let rh = t.mul(r, h_prev)?;
        check_diagonal(t.value(rh), "rgru reset product")?;
        let pre = self.mean_plus_bias(t, store, self.l, x, rh)?;
        let off = t.strict_tril(pre);
        let off = t.tanh(off);
        let sp = t.softplus(pre);
        let diag = t.diag_part(sp);
        let candidate = t.add(off, diag)?;
        graph::gate_combine(t, z, h_prev, candidate)
    }

    fn mean_plus_bias(&self, t: &mut Tape, store: &ParamStore, g: GateParams, a: Var, b: Var) -> Result<Var> {
        let raw = t.param_of(store, g.weights);
        let w = t.softplus(raw);
        let wa = t.masked_select(w, &Matrix::from_rows(&[&[1.0, 0.0]]))?;
        let wb = t.masked_select(w, &Matrix::from_rows(&[&[0.0, 1.0]]))?;
        let mean = graph::weighted_frechet_mean(t, &[a, b], &[wa, wb], self.norm)?;
        let raw_bias = t.param_of(store, g.bias);
        let off = t.strict_tril(raw_bias);
        let diag = t.diag_exp(raw_bias);
        let bias = t.add(off, diag)?;
        graph::bias_add(t, mean, bias)
    }

    fn gate(&self, t: &mut Tape, store: &ParamStore, g: GateParams, x: Var, h: Var) -> Result<Var> {
        let pre = self.mean_plus_bias(t, store, g, x, h)?;
        let s = t.sigmoid(pre);
        Ok(t.tril(s))
    }
}

fn check_diagonal(m: &Matrix, op: &'static str) -> Result<()> {
    for i in 0..m.rows() {
        let v = m.get(i, i);
        if !(v > DIAG_FLOOR) {
            return Err(Error::Domain { op, index: i, value: v });
        }
    }
    Ok(())
}

/// `H_0 = I`.
pub fn init_hidden(dim: usize) -> CholeskyPoint {
    CholeskyPoint::identity(dim)
}

/// Value-level cell update.
pub fn rgru_step(
    x: &CholeskyPoint,
    h_prev: &CholeskyPoint,
    params: &RgruParams,
    store: &ParamStore,
) -> Result<CholeskyPoint> {
    let mut t = Tape::inference();
    let xv = t.constant(x.as_matrix().clone());
    let hv = t.constant(h_prev.as_matrix().clone());
    let out = params.step(&mut t, store, xv, hv)?;
    CholeskyPoint::new(t.value(out).clone())
}
