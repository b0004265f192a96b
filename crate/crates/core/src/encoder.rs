//! Lifts a per-visit feature vector into the Cholesky space.
//!
//! The `c` features are treated as spatial positions. Two kernel-1
//! convolutions map each position's scalar value to `channels` outputs,
//! the map is normalized, a shrinkage covariance is taken across positions,
//! and the resulting SPD matrix is factored.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::SpdMatrix;
use crate::tensor::{glorot_uniform, Matrix, ParamId, ParamStore, Tape, Var};

const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShrinkageMode {
    /// Use the configured `rho`.
    FixedRho,
    /// Oracle approximating shrinkage; `rho` is ignored.
    Oas,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShrinkageConfig {
    pub mode: ShrinkageMode,
    pub rho: f64,
    /// Coefficient of the additive floor `jitter * (tr(S)/p + 1) * I`.
    pub jitter: f64,
}

impl Default for ShrinkageConfig {
    fn default() -> Self {
        Self {
            mode: ShrinkageMode::FixedRho,
            rho: 0.1,
            jitter: 1e-4,
        }
    }
}

impl ShrinkageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::InvalidArgument(format!("rho {} outside [0, 1]", self.rho)));
        }
        if !(self.jitter >= 0.0) {
            return Err(Error::InvalidArgument("jitter must be non-negative".into()));
        }
        Ok(())
    }
}

/// Weights of the two kernel-1 convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub hidden: usize,
    pub channels: usize,
    pub leaky_slope: f64,
    pub normalize: bool,
}

impl EncoderParams {
    pub fn init(store: &mut ParamStore, hidden: usize, channels: usize, rng: &mut impl Rng) -> Self {
        let w1 = glorot_uniform(hidden, 1, rng);
        // Kinks at uniform points of [0, 1], the normalized feature range: with
        // zero biases the first layer is linear there and the normalized
        // covariance would see little more than the spread of the inputs.
        let b1 = Matrix::from_vec(hidden, 1, w1.data().iter().map(|&w| -w * rng.gen_range(0.0..1.0)).collect())
            .expect("column shape");
        Self {
            w1: store.add("encoder.w1", w1),
            b1: store.add("encoder.b1", b1),
            w2: store.add("encoder.w2", glorot_uniform(channels, hidden, rng)),
            b2: store.add("encoder.b2", Matrix::zeros(channels, 1)),
            hidden,
            channels,
            leaky_slope: 0.01,
            normalize: true,
        }
    }

    /// Feature map of shape `channels x c` for a `c x 1` input node.
    pub fn encode(&self, t: &mut Tape, store: &ParamStore, s: Var) -> Result<Var> {
        if let Some(i) = t.value(s).first_non_finite() {
            return Err(Error::NonFinite(format!("encoder input feature {i}")));
        }
        let row = t.transpose(s);
        let w1 = t.param_of(store, self.w1);
        let b1 = t.param_of(store, self.b1);
        let w2 = t.param_of(store, self.w2);
        let b2 = t.param_of(store, self.b2);
        let h = t.matmul(w1, row)?;
        let h = t.add_col_broadcast(h, b1)?;
        let h = t.leaky_relu(h, self.leaky_slope);
        let fm = t.matmul(w2, h)?;
        let fm = t.add_col_broadcast(fm, b2)?;
        if self.normalize {
            normalize_map(t, fm)
        } else {
            Ok(fm)
        }
    }

    /// `encode` → `shrinkage_covariance` → Cholesky factor.
    pub fn space_shift(
        &self,
        t: &mut Tape,
        store: &ParamStore,
        s: Var,
        cfg: &ShrinkageConfig,
    ) -> Result<Var> {
        let fm = self.encode(t, store, s)?;
        let c = shrinkage_covariance_graph(t, fm, cfg)?;
        t.cholesky(c)
    }
}

/// Per-sample normalization over every entry of the map.
fn normalize_map(t: &mut Tape, fm: Var) -> Result<Var> {
    let (r, c) = t.shape(fm);
    let ones = t.constant(Matrix::filled(r, c, 1.0));
    let mean = t.mean(fm);
    let mean_map = t.mul_scalar(ones, mean)?;
    let centered = t.sub(fm, mean_map)?;
    let sq = t.square(centered);
    let var = t.mean(sq);
    let var = t.add_scalar(var, NORM_EPS);
    let log_var = t.log(var)?;
    let half = t.scale(log_var, -0.5);
    let inv_std = t.exp(half);
    t.mul_scalar(centered, inv_std)
}

/// Oracle approximating shrinkage intensity for a sample covariance `s`
/// estimated from `n` observations.
pub fn oas_intensity(s: &Matrix, n: usize) -> f64 {
    let p = s.rows() as f64;
    let mu = s.trace() / p;
    let alpha = s.data().iter().map(|x| x * x).sum::<f64>() / (p * p);
    let num = alpha + mu * mu;
    let den = (n as f64 + 1.0) * (alpha - mu * mu / p);
    if den <= 0.0 {
        1.0
    } else {
        (num / den).min(1.0)
    }
}

/// Sample covariance across the columns of `fm` (row means removed, divided by the column count).
pub fn sample_covariance(fm: &Matrix) -> Matrix {
    let (p, n) = fm.shape();
    let mut centered = fm.clone();
    for i in 0..p {
        let row = &mut centered.data_mut()[i * n..(i + 1) * n];
        let mean = row.iter().sum::<f64>() / n as f64;
        row.iter_mut().for_each(|x| *x -= mean);
    }
    centered.matmul_t(&centered).scale(1.0 / n as f64)
}

fn shrinkage_rho(s: &Matrix, n: usize, cfg: &ShrinkageConfig) -> f64 {
    match cfg.mode {
        ShrinkageMode::FixedRho => cfg.rho,
        ShrinkageMode::Oas => oas_intensity(s, n),
    }
}

/// `C = (1 - rho) S + rho (tr S / p) I + jitter (tr S / p + 1) I`.
///
/// Fails when the result is not positive definite (e.g. a constant map with
/// zero jitter).
pub fn shrinkage_covariance(fm: &Matrix, cfg: &ShrinkageConfig) -> Result<SpdMatrix> {
    cfg.validate()?;
    if fm.cols() == 0 {
        return Err(Error::Empty("feature map positions"));
    }
    let s = sample_covariance(fm);
    let p = s.rows();
    let rho = shrinkage_rho(&s, fm.cols(), cfg);
    let mu = s.trace() / p as f64;
    let mut c = s.scale(1.0 - rho);
    for i in 0..p {
        c[(i, i)] += rho * mu + cfg.jitter * (mu + 1.0);
    }
    SpdMatrix::new(c)
}

/// Tape version of [`shrinkage_covariance`]. The OAS intensity is part of the
/// graph except where it saturates at 1.
pub fn shrinkage_covariance_graph(t: &mut Tape, fm: Var, cfg: &ShrinkageConfig) -> Result<Var> {
    cfg.validate()?;
    let (p, n) = t.shape(fm);
    if n == 0 {
        return Err(Error::Empty("feature map positions"));
    }
    let mut center = Matrix::identity(n);
    for x in center.data_mut() {
        *x -= 1.0 / n as f64;
    }
    let center = t.constant(center);
    let centered = t.matmul(fm, center)?;
    let ct = t.transpose(centered);
    let s = t.matmul(centered, ct)?;
    let s = t.scale(s, 1.0 / n as f64);
    let diag = t.diag_part(s);
    let tr = t.sum(diag);
    let mu = t.scale(tr, 1.0 / p as f64);
    let rho = match cfg.mode {
        ShrinkageMode::FixedRho => t.scalar_constant(cfg.rho),
        ShrinkageMode::Oas => oas_intensity_graph(t, s, mu, n)?,
    };
    // rho * mu + jitter * (mu + 1)
    let rho_mu = t.mul(rho, mu)?;
    let jit = t.scale(mu, cfg.jitter);
    let coeff = t.add(rho_mu, jit)?;
    let coeff = t.add_scalar(coeff, cfg.jitter);
    let eye = t.constant(Matrix::identity(p));
    let target = t.mul_scalar(eye, coeff)?;
    let keep = t.one_minus(rho);
    let shrunk = t.mul_scalar(s, keep)?;
    t.add(shrunk, target)
}

/// Graph form of [`oas_intensity`]; `mu` is `tr(S) / p`.
fn oas_intensity_graph(t: &mut Tape, s: Var, mu: Var, n: usize) -> Result<Var> {
    if oas_intensity(t.value(s), n) >= 1.0 {
        return Ok(t.scalar_constant(1.0));
    }
    let p = t.shape(s).0 as f64;
    let sq = t.square(s);
    let alpha = t.sum(sq);
    let alpha = t.scale(alpha, 1.0 / (p * p));
    let mu2 = t.square(mu);
    let num = t.add(alpha, mu2)?;
    let mu2_p = t.scale(mu2, 1.0 / p);
    let den = t.sub(alpha, mu2_p)?;
    let den = t.scale(den, n as f64 + 1.0);
    let inv = t.pow(den, -1.0)?;
    t.mul(num, inv)
}

/// Value-level `encode` for a single feature vector.
pub fn encode(s: &[f64], params: &EncoderParams, store: &ParamStore) -> Result<Matrix> {
    let mut t = Tape::inference();
    let sv = t.constant(Matrix::column(s));
    let fm = params.encode(&mut t, store, sv)?;
    Ok(t.value(fm).clone())
}
