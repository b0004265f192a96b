mod common;

use cholseq::tensor::{Matrix, ParamStore, Tape, Var};
use cholseq::Result;
use common::*;

fn store_with(mats: &[(&str, Matrix)]) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, m) in mats {
        s.add(*name, m.clone());
    }
    s
}

fn check_unary(name: &str, input: Matrix, op: impl Fn(&mut Tape, Var) -> Result<Var>) {
    let store = store_with(&[("x", input)]);
    let ids: Vec<_> = store.iter().map(|p| p.id).collect();
    let report = check_gradients(&store, |t, s| {
        let x = t.param_of(s, ids[0]);
        let y = op(t, x)?;
        project(t, y, 7)
    });
    assert!(report.max_rel_err < FD_REL_TOL, "{name}: {report:?}");
}

fn check_binary(
    name: &str,
    a: Matrix,
    b: Matrix,
    op: impl Fn(&mut Tape, Var, Var) -> Result<Var>,
) {
    let store = store_with(&[("a", a), ("b", b)]);
    let ids: Vec<_> = store.iter().map(|p| p.id).collect();
    let report = check_gradients(&store, |t, s| {
        let a = t.param_of(s, ids[0]);
        let b = t.param_of(s, ids[1]);
        let y = op(t, a, b)?;
        project(t, y, 11)
    });
    assert!(report.max_rel_err < FD_REL_TOL, "{name}: {report:?}");
}

#[test]
fn elementwise_binary_ops() {
    let mut r = rng(1);
    let a = random_matrix(3, 4, 1.0, &mut r);
    let b = random_matrix(3, 4, 1.0, &mut r);
    check_binary("add", a.clone(), b.clone(), |t, a, b| t.add(a, b));
    check_binary("sub", a.clone(), b.clone(), |t, a, b| t.sub(a, b));
    check_binary("mul", a.clone(), b.clone(), |t, a, b| t.mul(a, b));
    let c = random_matrix(4, 2, 1.0, &mut r);
    check_binary("matmul", a.clone(), c, |t, a, b| t.matmul(a, b));
    let col = random_matrix(3, 1, 1.0, &mut r);
    check_binary("add_col_broadcast", a.clone(), col, |t, a, b| t.add_col_broadcast(a, b));
    let s = Matrix::scalar(0.7);
    check_binary("mul_scalar", a.clone(), s, |t, a, s| t.mul_scalar(a, s));
    let mask = Matrix::from_rows(&[
        &[1.0, 0.0, 1.0, 1.0],
        &[0.0, 0.0, 1.0, 0.0],
        &[1.0, 1.0, 0.0, 1.0],
    ]);
    check_binary("select", a, b, move |t, a, b| t.select(&mask, a, b));
}

#[test]
fn elementwise_unary_ops() {
    let mut r = rng(2);
    let x = random_matrix(3, 3, 1.5, &mut r);
    let pos = x.map(|v| v.abs() + 0.2);
    check_unary("transpose", x.clone(), |t, a| Ok(t.transpose(a)));
    check_unary("exp", x.clone(), |t, a| Ok(t.exp(a)));
    check_unary("log", pos.clone(), |t, a| t.log(a));
    check_unary("sigmoid", x.clone(), |t, a| Ok(t.sigmoid(a)));
    check_unary("tanh", x.clone(), |t, a| Ok(t.tanh(a)));
    check_unary("softplus", x.clone(), |t, a| Ok(t.softplus(a)));
    check_unary("relu", x.clone(), |t, a| Ok(t.relu(a)));
    check_unary("leaky_relu", x.clone(), |t, a| Ok(t.leaky_relu(a, 0.01)));
    check_unary("square", x.clone(), |t, a| Ok(t.square(a)));
    check_unary("sqrt", pos.clone(), |t, a| t.sqrt(a));
    check_unary("scale", x.clone(), |t, a| Ok(t.scale(a, -2.5)));
    check_unary("add_scalar", x.clone(), |t, a| Ok(t.add_scalar(a, 3.0)));
    check_unary("pow", pos.clone(), |t, a| t.pow(a, 2.5));
    check_unary("clamp_min", x.clone(), |t, a| Ok(t.clamp_min(a, 0.05)));
}

#[test]
fn reductions_and_structure_ops() {
    let mut r = rng(3);
    let x = random_matrix(4, 4, 1.0, &mut r);
    check_unary("sum", x.clone(), |t, a| Ok(t.sum(a)));
    check_unary("mean", x.clone(), |t, a| Ok(t.mean(a)));
    check_unary("softmax", random_matrix(5, 1, 2.0, &mut r), |t, a| Ok(t.softmax(a)));
    let mask = Matrix::from_rows(&[
        &[1.0, 0.0, 0.0, 1.0],
        &[0.0, 1.0, 1.0, 0.0],
        &[1.0, 1.0, 0.0, 0.0],
        &[0.0, 0.0, 0.0, 1.0],
    ]);
    check_unary("masked_select", x.clone(), move |t, a| t.masked_select(a, &mask));
    check_unary("tril", x.clone(), |t, a| Ok(t.tril(a)));
    check_unary("strict_tril", x.clone(), |t, a| Ok(t.strict_tril(a)));
    check_unary("diag_part", x.clone(), |t, a| Ok(t.diag_part(a)));
    check_unary("diag_exp", x.clone(), |t, a| Ok(t.diag_exp(a)));
    let pos = random_point(4, 0.3, 2.0, &mut r);
    check_unary("diag_log", pos.clone(), |t, a| t.diag_log(a));
    check_unary("flatten_lower", x.clone(), |t, a| t.flatten_lower(a));
    check_unary("unflatten_lower", random_matrix(10, 1, 1.0, &mut r), |t, a| {
        t.unflatten_lower(a, 4)
    });
}

#[test]
fn cholesky_through_symmetric_input() {
    let mut r = rng(4);
    for d in [1, 2, 5, 8] {
        let b = random_matrix(d, d, 1.0, &mut r);
        check_unary("cholesky", b, move |t, b| {
            let bt = t.transpose(b);
            let c = t.matmul(b, bt)?;
            let jitter = t.constant(Matrix::identity(d).scale(0.5));
            let spd = t.add(c, jitter)?;
            t.cholesky(spd)
        });
    }
}

#[test]
fn composite_graph() {
    let mut r = rng(5);
    let w = random_matrix(3, 4, 0.8, &mut r);
    let x = random_matrix(4, 2, 0.8, &mut r);
    check_binary("composite", w, x, |t, w, x| {
        let h = t.matmul(w, x)?;
        let a = t.tanh(h);
        let b = t.softplus(h);
        let c = t.mul(a, b)?;
        let s = t.sigmoid(c);
        let sq = t.square(s);
        let e = t.exp(sq);
        let l = t.log(e)?;
        let sm = t.softmax(l);
        let m = t.mean(sm);
        let rr = t.relu(h);
        let q = t.sum(rr);
        let out = t.add(m, q)?;
        Ok(out)
    });
}

#[test]
fn replay_is_bit_identical() {
    let mut r = rng(6);
    let w = random_matrix(6, 6, 1.0, &mut r);
    let run = || {
        let mut store = ParamStore::new();
        let id = store.add("w", w.clone());
        let mut t = Tape::new();
        let v = t.param_of(&store, id);
        let a = t.tanh(v);
        let b = t.matmul(a, v).unwrap();
        let s = t.softmax(b);
        let root = project(&mut t, s, 3).unwrap();
        t.backward(root).unwrap().accumulate_into(&mut store);
        (t.scalar(root), store.get(id).grad.clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.to_bits(), b.to_bits());
    assert_eq!(ga, gb);
}
