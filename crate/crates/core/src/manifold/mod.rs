//! The Cholesky space: lower-triangular matrices with positive diagonal under
//! the log-Cholesky metric.
//!
//! Notation used in the docs below: `⌊X⌋` is the strictly lower part of `X`
//! and `D(X)` its diagonal.
//!
//! Differentiable counterparts of these maps live in [`graph`].

pub mod graph;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cholesky, Matrix};

/// Smallest admissible diagonal entry of a [`CholeskyPoint`].
pub const DIAG_FLOOR: f64 = 1e-12;

/// Symmetry tolerance accepted by [`SpdMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-10;

/// A point of the Cholesky space.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyPoint(Matrix);

impl CholeskyPoint {
    pub fn new(mat: Matrix) -> Result<Self> {
        check_point(&mat)?;
        Ok(Self(mat))
    }

    pub fn identity(d: usize) -> Self {
        Self(Matrix::identity(d))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// Validates the Cholesky-point invariant on a raw matrix.
pub fn check_point(m: &Matrix) -> Result<()> {
    if !m.is_square() {
        return Err(Error::InvalidPoint(format!("not square: {:?}", m.shape())));
    }
    if let Some(i) = m.first_non_finite() {
        return Err(Error::InvalidPoint(format!("non-finite entry at {i}")));
    }
    if !m.is_lower_triangular() {
        return Err(Error::InvalidPoint("nonzero entry above the diagonal".into()));
    }
    for (i, d) in m.diag().into_iter().enumerate() {
        if !(d > DIAG_FLOOR) {
            return Err(Error::Domain {
                op: "cholesky_point",
                index: i * m.cols() + i,
                value: d,
            });
        }
    }
    Ok(())
}

/// A tangent vector: lower-triangular with unconstrained diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector(Matrix);

impl TangentVector {
    pub fn new(mat: Matrix) -> Result<Self> {
        if !mat.is_square() || !mat.is_lower_triangular() {
            return Err(Error::InvalidArgument(
                "tangent vector must be square lower-triangular".into(),
            ));
        }
        Ok(Self(mat))
    }

    pub fn zeros(d: usize) -> Self {
        Self(Matrix::zeros(d, d))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

/// A symmetric positive-definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(Matrix);

impl SpdMatrix {
    /// Checks symmetry and that a Cholesky factorization exists.
    pub fn new(mat: Matrix) -> Result<Self> {
        if !mat.is_symmetric(SYMMETRY_TOL) {
            return Err(Error::InvalidArgument("matrix is not symmetric".into()));
        }
        cholesky(&mat)?;
        Ok(Self(mat))
    }

    pub fn dim(&self) -> usize {
        self.0.rows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }
}

fn check_dims(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    a.check_same_shape(b, op)
}

/// Log-Cholesky inner product `g_L(X, Y)`.
pub fn metric(base: &CholeskyPoint, x: &TangentVector, y: &TangentVector) -> Result<f64> {
    let (l, x, y) = (base.as_matrix(), x.as_matrix(), y.as_matrix());
    check_dims("metric", l, x)?;
    check_dims("metric", x, y)?;
    let d = l.rows();
    let mut acc = 0.0;
    for i in 0..d {
        for j in 0..i {
            acc += x.get(i, j) * y.get(i, j);
        }
        let lj = l.get(i, i);
        acc += x.get(i, i) * y.get(i, i) / (lj * lj);
    }
    Ok(acc)
}

/// `Exp_L(X) = ⌊L⌋ + ⌊X⌋ + D(L) exp(D(X) D(L)^-1)`.
pub fn exp_map(base: &CholeskyPoint, x: &TangentVector) -> Result<CholeskyPoint> {
    let (l, x) = (base.as_matrix(), x.as_matrix());
    check_dims("exp_map", l, x)?;
    let d = l.rows();
    let mut out = l.strict_tril().add(&x.strict_tril())?;
    for i in 0..d {
        let li = l.get(i, i);
        out.set(i, i, li * (x.get(i, i) / li).exp());
    }
    CholeskyPoint::new(out)
}

/// `Log_X(L) = ⌊L⌋ - ⌊X⌋ + D(X) log(D(X)^-1 D(L))`.
pub fn log_map(base: &CholeskyPoint, target: &CholeskyPoint) -> Result<TangentVector> {
    let (x, l) = (base.as_matrix(), target.as_matrix());
    check_dims("log_map", x, l)?;
    let d = x.rows();
    let mut out = l.strict_tril().sub(&x.strict_tril())?;
    for i in 0..d {
        let xi = x.get(i, i);
        out.set(i, i, xi * (l.get(i, i) / xi).ln());
    }
    TangentVector::new(out)
}

/// Lower Cholesky factor with positive diagonal.
pub fn cholesky_map(spd: &SpdMatrix) -> Result<CholeskyPoint> {
    CholeskyPoint::new(cholesky(spd.as_matrix())?)
}

/// `L L^T`.
pub fn inverse_cholesky_map(p: &CholeskyPoint) -> Result<SpdMatrix> {
    let l = p.as_matrix();
    let mut c = l.matmul_t(l);
    // Force exact symmetry; rounding can differ between (i,j) and (j,i).
    for i in 0..c.rows() {
        for j in 0..i {
            let v = c.get(i, j);
            c.set(j, i, v);
        }
    }
    SpdMatrix::new(c)
}

/// How the weighted Fréchet mean is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WfmNormalization {
    /// Divide by the number of points, weights applied inside the sums.
    #[default]
    Count,
    /// Divide by the sum of the weights.
    WeightSum,
}

/// Closed-form log-Cholesky mean
/// `(1/N) Σ ⌊X_i⌋ + exp(N^-1 Σ log D(X_i))`.
pub fn frechet_mean(points: &[CholeskyPoint]) -> Result<CholeskyPoint> {
    let ones = vec![1.0; points.len()];
    weighted_frechet_mean(points, &ones, WfmNormalization::Count)
}

/// Weighted Fréchet mean
/// `(1/N) Σ w_i ⌊X_i⌋ + exp(N^-1 Σ w_i log D(X_i))`.
pub fn weighted_frechet_mean(
    points: &[CholeskyPoint],
    weights: &[f64],
    norm: WfmNormalization,
) -> Result<CholeskyPoint> {
    let first = points.first().ok_or(Error::Empty("weighted_frechet_mean points"))?;
    if points.len() != weights.len() {
        return Err(Error::InvalidArgument(format!(
            "{} points but {} weights",
            points.len(),
            weights.len()
        )));
    }
    if let Some(w) = weights.iter().find(|w| !(**w >= 0.0)) {
        return Err(Error::InvalidArgument(format!("negative weight {w}")));
    }
    let d = first.dim();
    let denom = match norm {
        WfmNormalization::Count => points.len() as f64,
        WfmNormalization::WeightSum => weights.iter().sum::<f64>(),
    };
    if !(denom > 0.0) {
        return Err(Error::InvalidArgument("weights sum to zero".into()));
    }
    let mut lower = Matrix::zeros(d, d);
    let mut log_diag = vec![0.0; d];
    for (p, &w) in points.iter().zip(weights) {
        let m = p.as_matrix();
        check_dims("weighted_frechet_mean", first.as_matrix(), m)?;
        for i in 0..d {
            for j in 0..i {
                lower[(i, j)] += w * m.get(i, j);
            }
            log_diag[i] += w * m.get(i, i).ln();
        }
    }
    let mut out = lower.scale(1.0 / denom);
    for (i, s) in log_diag.into_iter().enumerate() {
        out.set(i, i, (s / denom).exp());
    }
    CholeskyPoint::new(out)
}

/// `X ⊕ Y = ⌊X⌋ + ⌊Y⌋ + D(X) D(Y)`.
pub fn bias_add(x: &CholeskyPoint, y: &CholeskyPoint) -> Result<CholeskyPoint> {
    let (a, b) = (x.as_matrix(), y.as_matrix());
    check_dims("bias_add", a, b)?;
    let mut out = a.strict_tril().add(&b.strict_tril())?;
    for i in 0..a.rows() {
        out.set(i, i, a.get(i, i) * b.get(i, i));
    }
    CholeskyPoint::new(out)
}

/// Elementwise convex combination `(1 - z) ⊙ a + z ⊙ b`.
///
/// `z` is lower-triangular with every lower entry in `(0, 1)`.
pub fn gate_combine(z: &Matrix, a: &CholeskyPoint, b: &CholeskyPoint) -> Result<CholeskyPoint> {
    let (am, bm) = (a.as_matrix(), b.as_matrix());
    check_dims("gate_combine", z, am)?;
    check_dims("gate_combine", am, bm)?;
    let d = z.rows();
    for i in 0..d {
        for j in 0..=i {
            let v = z.get(i, j);
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Domain {
                    op: "gate_combine",
                    index: i * d + j,
                    value: v,
                });
            }
        }
    }
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let zij = z.get(i, j);
            out.set(i, j, (1.0 - zij) * am.get(i, j) + zij * bm.get(i, j));
        }
    }
    CholeskyPoint::new(out)
}
