//! Define-by-run reverse-mode differentiation over matrix-valued nodes.
//!
//! Every operation appends a node holding its output value and the operands
//! it was computed from. Operands always precede their consumers, so append
//! order is a topological order and [`Tape::backward`] simply walks the node
//! list in reverse.

use super::matrix::{self, Matrix};
use super::param::{Param, ParamId, ParamStore};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Sum(Var),
    Mean(Var),
    Square(Var),
    Sqrt(Var),
    Softmax(Var),
    MaskedSelect(Var, Vec<usize>),
    Tril(Var),
    StrictTril(Var),
    DiagPart(Var),
    DiagExp(Var),
    DiagLog(Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    AddColBroadcast(Var, Var),
    Pow(Var, f64),
    ClampMin(Var, f64),
    FlattenLower(Var),
    UnflattenLower(Var),
    Select { mask: Matrix, one: Var, zero: Var },
    Cholesky(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Matrix,
    op: Op,
}

/// Append-only record of a computation.
#[derive(Debug, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that evaluates values only; nothing is differentiable.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// First entry of a node, for 1x1 results.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push_leaf(value)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Matrix::scalar(value))
    }

    /// Registers a parameter as a leaf. Repeated calls return the same node.
    pub fn param(&mut self, p: &Param) -> Var {
        let slot = p.id.0;
        if let Some(Some(v)) = self.param_vars.get(slot) {
            return *v;
        }
        let v = self.push_leaf(p.value.clone());
        if self.param_vars.len() <= slot {
            self.param_vars.resize(slot + 1, None);
        }
        self.param_vars[slot] = Some(v);
        v
    }

    /// Shorthand for `self.param(store.get(id))`.
    pub fn param_of(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.param(store.get(id))
    }

    fn push_leaf(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        self.value(a).check_same_shape(self.value(b), op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).zip_map_unchecked(self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).zip_map_unchecked(self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map_unchecked(self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        check_positive(self.value(a), "log")?;
        let v = self.value(a).map(f64::ln);
        Ok(self.push(v, Op::Log(a)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).map(softplus);
        self.push(v, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::scalar(m.sum() / m.len() as f64);
        self.push(v, Op::Mean(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    /// Square root; the gradient at exactly zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if let Some(index) = m.data().iter().position(|&x| !(x >= 0.0)) {
            return Err(Error::Domain {
                op: "sqrt",
                index,
                value: m.data()[index],
            });
        }
        let v = m.map(f64::sqrt);
        Ok(self.push(v, Op::Sqrt(a)))
    }

    /// Softmax over all entries of `a`.
    pub fn softmax(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let max = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e = m.map(|x| (x - max).exp());
        let z = e.sum();
        let v = e.map(|x| x / z);
        self.push(v, Op::Softmax(a))
    }

    /// Entries of `a` where `mask` is nonzero, as a column vector in row-major order.
    pub fn masked_select(&mut self, a: Var, mask: &Matrix) -> Result<Var> {
        self.value(a).check_same_shape(mask, "masked_select")?;
        let idx: Vec<usize> = mask
            .data()
            .iter()
            .enumerate()
            .filter(|(_, &m)| m != 0.0)
            .map(|(i, _)| i)
            .collect();
        let src = self.value(a).data();
        let vals: Vec<f64> = idx.iter().map(|&i| src[i]).collect();
        Ok(self.push(Matrix::column(&vals), Op::MaskedSelect(a, idx)))
    }

    /// Lower triangle, diagonal included.
    pub fn tril(&mut self, a: Var) -> Var {
        let v = self.value(a).tril();
        self.push(v, Op::Tril(a))
    }

    pub fn strict_tril(&mut self, a: Var) -> Var {
        let v = self.value(a).strict_tril();
        self.push(v, Op::StrictTril(a))
    }

    pub fn diag_part(&mut self, a: Var) -> Var {
        let v = self.value(a).diag_part();
        self.push(v, Op::DiagPart(a))
    }

    /// `exp` of the diagonal; off-diagonal entries of the result are zero.
    pub fn diag_exp(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows().min(m.cols()) {
            v.set(i, i, m.get(i, i).exp());
        }
        self.push(v, Op::DiagExp(a))
    }

    /// `ln` of the diagonal; off-diagonal entries of the result are zero.
    pub fn diag_log(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        let mut v = Matrix::zeros(m.rows(), m.cols());
        for i in 0..m.rows().min(m.cols()) {
            let x = m.get(i, i);
            if !(x > 0.0) {
                return Err(Error::Domain {
                    op: "diag_log",
                    index: i * m.cols() + i,
                    value: x,
                });
            }
            v.set(i, i, x.ln());
        }
        Ok(self.push(v, Op::DiagLog(a)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).scale(c);
        self.push(v, Op::Scale(a, c))
    }

    /// `a + c` entrywise.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.push(v, Op::AddScalar(a))
    }

    /// `1 - a` entrywise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    /// `s * a` where `s` is a 1x1 node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        if sv.shape() != (1, 1) {
            return Err(Error::ShapeMismatch {
                op: "mul_scalar",
                left: sv.shape(),
                right: (1, 1),
            });
        }
        let c = sv.item();
        let v = self.value(a).scale(c);
        Ok(self.push(v, Op::MulScalar(a, s)))
    }

    /// `a + b` with the `r x 1` column `b` broadcast across the columns of `a`.
    pub fn add_col_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (am, bm) = (self.value(a), self.value(b));
        if bm.cols() != 1 || bm.rows() != am.rows() {
            return Err(Error::ShapeMismatch {
                op: "add_col_broadcast",
                left: am.shape(),
                right: bm.shape(),
            });
        }
        let mut v = am.clone();
        let cols = v.cols();
        for i in 0..v.rows() {
            let bi = bm.get(i, 0);
            for x in &mut v.data_mut()[i * cols..(i + 1) * cols] {
                *x += bi;
            }
        }
        Ok(self.push(v, Op::AddColBroadcast(a, b)))
    }

    /// `a^p` entrywise for `a >= 0`.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var> {
        let m = self.value(a);
        if let Some(index) = m.data().iter().position(|&x| !(x >= 0.0)) {
            return Err(Error::Domain {
                op: "pow",
                index,
                value: m.data()[index],
            });
        }
        let v = m.map(|x| x.powf(p));
        Ok(self.push(v, Op::Pow(a, p)))
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let v = self.value(a).map(|x| x.max(lo));
        self.push(v, Op::ClampMin(a, lo))
    }

    /// Packs the lower triangle into a column of length `d(d+1)/2`.
    pub fn flatten_lower(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a);
        if !m.is_square() {
            return Err(Error::ShapeMismatch {
                op: "flatten_lower",
                left: m.shape(),
                right: (m.cols(), m.rows()),
            });
        }
        let v = matrix::flatten_lower(m);
        Ok(self.push(v, Op::FlattenLower(a)))
    }

    pub fn unflatten_lower(&mut self, a: Var, d: usize) -> Result<Var> {
        let v = matrix::unflatten_lower(self.value(a), d)?;
        Ok(self.push(v, Op::UnflattenLower(a)))
    }

    /// Entry from `one` where `mask` is 1, from `zero` elsewhere.
    pub fn select(&mut self, mask: &Matrix, one: Var, zero: Var) -> Result<Var> {
        self.same_shape(one, zero, "select")?;
        self.value(one).check_same_shape(mask, "select")?;
        let (a, b) = (self.value(one).data(), self.value(zero).data());
        let vals: Vec<f64> = mask
            .data()
            .iter()
            .enumerate()
            .map(|(i, &m)| if m != 0.0 { a[i] } else { b[i] })
            .collect();
        let v = Matrix::from_vec(mask.rows(), mask.cols(), vals)?;
        Ok(self.push(
            v,
            Op::Select {
                mask: mask.clone(),
                one,
                zero,
            },
        ))
    }

    /// Cholesky factor of a symmetric positive-definite node.
    pub fn cholesky(&mut self, a: Var) -> Result<Var> {
        let v = matrix::cholesky(self.value(a))?;
        Ok(self.push(v, Op::Cholesky(a)))
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: rv.rows(),
                cols: rv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Matrix::scalar(1.0));
        let mut visited = 0;
        for idx in (0..=root.0).rev() {
            visited += 1;
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(p, v)| v.map(|v| (ParamId(p), v)))
            .collect();
        Ok(Gradients {
            grads,
            params,
            visited,
        })
    }

    fn propagate(&self, idx: usize, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                acc(grads, *a, g.zip_map_unchecked(val(*b), |g, x| g * x));
                acc(grads, *b, g.zip_map_unchecked(val(*a), |g, x| g * x));
            }
            Op::MatMul(a, b) => {
                match &mut grads[a.0] {
                    Some(ga) => ga.add_matmul_t(g, val(*b)),
                    slot @ None => *slot = Some(g.matmul_t(val(*b))),
                }
                match &mut grads[b.0] {
                    Some(gb) => gb.add_t_matmul(val(*a), g),
                    slot @ None => *slot = Some(val(*a).t_matmul(g)),
                }
            }
            Op::Transpose(a) => acc(grads, *a, g.transpose()),
            Op::Exp(a) => acc(grads, *a, g.zip_map_unchecked(y, |g, y| g * y)),
            Op::Log(a) => acc(grads, *a, g.zip_map_unchecked(val(*a), |g, x| g / x)),
            Op::Sigmoid(a) => acc(grads, *a, g.zip_map_unchecked(y, |g, y| g * y * (1.0 - y))),
            Op::Tanh(a) => acc(grads, *a, g.zip_map_unchecked(y, |g, y| g * (1.0 - y * y))),
            Op::Softplus(a) => acc(grads, *a, g.zip_map_unchecked(val(*a), |g, x| g * sigmoid(x))),
            Op::Relu(a) => acc(
                grads,
                *a,
                g.zip_map_unchecked(val(*a), |g, x| if x > 0.0 { g } else { 0.0 }),
            ),
            Op::LeakyRelu(a, slope) => acc(
                grads,
                *a,
                g.zip_map_unchecked(val(*a), |g, x| if x > 0.0 { g } else { slope * g }),
            ),
            Op::Sum(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = val(*a).shape();
                acc(grads, *a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::Square(a) => acc(grads, *a, g.zip_map_unchecked(val(*a), |g, x| 2.0 * g * x)),
            Op::Sqrt(a) => acc(
                grads,
                *a,
                g.zip_map_unchecked(y, |g, y| if y > 0.0 { g / (2.0 * y) } else { 0.0 }),
            ),
            Op::Softmax(a) => {
                let dot: f64 = g.data().iter().zip(y.data()).map(|(g, y)| g * y).sum();
                acc(grads, *a, g.zip_map_unchecked(y, |g, y| y * (g - dot)));
            }
            Op::MaskedSelect(a, idx) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (k, &i) in idx.iter().enumerate() {
                    ga.data_mut()[i] += g.data()[k];
                }
                acc(grads, *a, ga);
            }
            Op::Tril(a) => acc(grads, *a, g.tril()),
            Op::StrictTril(a) => acc(grads, *a, g.strict_tril()),
            Op::DiagPart(a) => acc(grads, *a, g.diag_part()),
            Op::DiagExp(a) => {
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows().min(g.cols()) {
                    ga.set(i, i, g.get(i, i) * y.get(i, i));
                }
                acc(grads, *a, ga);
            }
            Op::DiagLog(a) => {
                let x = val(*a);
                let mut ga = Matrix::zeros(g.rows(), g.cols());
                for i in 0..g.rows().min(g.cols()) {
                    ga.set(i, i, g.get(i, i) / x.get(i, i));
                }
                acc(grads, *a, ga);
            }
            Op::Scale(a, c) => acc(grads, *a, g.scale(*c)),
            Op::AddScalar(a) => acc(grads, *a, g.clone()),
            Op::MulScalar(a, s) => {
                let c = val(*s).item();
                acc(grads, *a, g.scale(c));
                let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(g, x)| g * x).sum();
                acc(grads, *s, Matrix::scalar(gs));
            }
            Op::AddColBroadcast(a, b) => {
                acc(grads, *a, g.clone());
                let cols = g.cols();
                let sums: Vec<f64> = (0..g.rows())
                    .map(|i| g.data()[i * cols..(i + 1) * cols].iter().sum())
                    .collect();
                acc(grads, *b, Matrix::column(&sums));
            }
            Op::Pow(a, p) => {
                let p = *p;
                acc(
                    grads,
                    *a,
                    g.zip_map_unchecked(val(*a), |g, x| {
                        if p == 0.0 || (x == 0.0 && p < 1.0) {
                            0.0
                        } else {
                            g * p * x.powf(p - 1.0)
                        }
                    }),
                );
            }
            Op::ClampMin(a, lo) => acc(
                grads,
                *a,
                g.zip_map_unchecked(val(*a), |g, x| if x > *lo { g } else { 0.0 }),
            ),
            Op::FlattenLower(a) => {
                let d = val(*a).rows();
                acc(grads, *a, matrix::unflatten_lower(g, d).expect("packed length"));
            }
            Op::UnflattenLower(a) => acc(grads, *a, matrix::flatten_lower(g)),
            Op::Select { mask, one, zero } => {
                let g1 = g.zip_map_unchecked(mask, |g, m| if m != 0.0 { g } else { 0.0 });
                let g0 = g.zip_map_unchecked(mask, |g, m| if m != 0.0 { 0.0 } else { g });
                acc(grads, *one, g1);
                acc(grads, *zero, g0);
            }
            Op::Cholesky(a) => acc(grads, *a, cholesky_backward(y, g)),
        }
    }
}

/// Gradient of a scalar through `L = chol(A)`, returned as a symmetric matrix.
///
/// With `Phi` taking the lower triangle and halving the diagonal:
/// `S = L^-T Phi(L^T Lbar) L^-1`, `Abar = (S + S^T) / 2`.
fn cholesky_backward(l: &Matrix, lbar: &Matrix) -> Matrix {
    let mut p = l.t_matmul(lbar).tril();
    for i in 0..p.rows() {
        let v = p.get(i, i);
        p.set(i, i, 0.5 * v);
    }
    // Y = L^-T P, then S = Y L^-1 = (L^-T Y^T)^T.
    let y = l.solve_lower_transpose(&p);
    let s = l.solve_lower_transpose(&y.transpose()).transpose();
    let st = s.transpose();
    s.zip_map_unchecked(&st, |a, b| 0.5 * (a + b))
}

fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign_unchecked(&g),
        slot @ None => *slot = Some(g),
    }
}

fn check_positive(m: &Matrix, op: &'static str) -> Result<()> {
    if let Some(index) = m.data().iter().position(|&x| !(x > 0.0)) {
        return Err(Error::Domain {
            op,
            index,
            value: m.data()[index],
        });
    }
    Ok(())
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

/// Result of a reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<(ParamId, Var)>,
    visited: usize,
}

impl Gradients {
    /// Gradient of the root with respect to `v`, if `v` influenced the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes the reverse pass stepped through.
    pub fn nodes_visited(&self) -> usize {
        self.visited
    }

    /// Adds each registered parameter's gradient into its `grad` buffer.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                store.get_mut(id).grad.add_assign_unchecked(g);
            }
        }
    }
}
