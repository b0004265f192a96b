use super::ModelParams;
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::imputation::masked_estimate_graph;
use crate::manifold::{check_point, graph};
use crate::ode::evolve_hidden_graph;
use crate::tensor::{Matrix, Tape, Var};

/// Nodes recorded for one visit.
#[derive(Debug, Clone, Copy)]
pub struct VisitTrace {
    /// `H_i` after the RGRU update.
    pub hidden: Var,
    /// `H'_i`, the evolved tangent before the update.
    pub tangent: Var,
    /// `f_psi(H'_i)`, the decoder's estimate of every feature.
    pub decoded: Var,
    /// Observed entries merged with decoded ones.
    pub imputed: Var,
    pub probs: Var,
}

#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub visits: Vec<VisitTrace>,
}

/// Plain values of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceValues {
    pub hidden: Vec<Matrix>,
    pub tangent: Vec<Matrix>,
    pub decoded: Vec<Vec<f64>>,
    pub imputed: Vec<Vec<f64>>,
    pub probs: Vec<Vec<f64>>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.visits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.visits.is_empty()
    }

    pub fn values(&self, t: &Tape) -> TraceValues {
        let col = |v: Var| t.value(v).data().to_vec();
        TraceValues {
            hidden: self.visits.iter().map(|v| t.value(v.hidden).clone()).collect(),
            tangent: self.visits.iter().map(|v| t.value(v.tangent).clone()).collect(),
            decoded: self.visits.iter().map(|v| col(v.decoded)).collect(),
            imputed: self.visits.iter().map(|v| col(v.imputed)).collect(),
            probs: self.visits.iter().map(|v| col(v.probs)).collect(),
        }
    }
}

/// Records the whole sequence on `t`: starting from `H_0 = I`, each visit
/// evolves the state to its time, fills unobserved entries from the decoder,
/// lifts the merged vector to the manifold and applies the RGRU update.
pub fn forward_sequence(t: &mut Tape, params: &ModelParams, seq: &Sequence) -> Result<ForwardTrace> {
    let cfg = &params.config;
    let store = &params.store;
    if seq.is_empty() {
        return Err(Error::Empty("sequence visits"));
    }
    if seq.n_features() != cfg.n_features {
        return Err(Error::ShapeMismatch {
            op: "forward_sequence",
            left: (seq.len(), seq.n_features()),
            right: (seq.len(), cfg.n_features),
        });
    }
    if let Some(i) = (1..seq.len()).find(|&i| !(seq.times[i] > seq.times[i - 1])) {
        return Err(Error::InvalidArgument(format!(
            "subject {}: visit {i} time does not increase",
            seq.subject_id
        )));
    }
    let d = cfg.channels;
    let mut h = t.constant(Matrix::identity(d));
    let mut t_prev = seq.times[0];
    let mut visits = Vec::with_capacity(seq.len());
    let w_y = t.param_of(store, params.classifier.w);
    let b_y = t.param_of(store, params.classifier.b);
    for i in 0..seq.len() {
        let at_visit = |e: Error| match e {
            Error::NonFinite(m) => Error::NonFinite(format!("visit {i}: {m}")),
            Error::Domain { op, index, value } => Error::NonFinite(format!(
                "visit {i}: {op} domain violation at {index} (value {value})"
            )),
            other => other,
        };
        let (h_evolved, tangent) =
            evolve_hidden_graph(t, store, &params.ode, h, (t_prev, seq.times[i]), &cfg.solver).map_err(at_visit)?;
        let decoded = params.decoder.decode(t, store, tangent)?;
        let imputed = masked_estimate_graph(t, seq.visit(i), seq.visit_mask(i), decoded)?;
        let x = params
            .encoder
            .space_shift(t, store, imputed, &cfg.shrinkage)
            .map_err(at_visit)?;
        h = params.rgru.step(t, store, x, h_evolved).map_err(at_visit)?;
        debug_assert!(check_point(t.value(h)).is_ok(), "hidden state left the manifold at visit {i}");
        let logits = {
            let v = graph::log_at_identity(t, h).map_err(at_visit)?;
            let flat = t.flatten_lower(v)?;
            let z = t.matmul(w_y, flat)?;
            t.add(z, b_y)?
        };
        let probs = t.softmax(logits);
        if let Some(k) = t.value(probs).first_non_finite() {
            return Err(Error::NonFinite(format!("visit {i}: class probability {k}")));
        }
        visits.push(VisitTrace {
            hidden: h,
            tangent,
            decoded,
            imputed,
            probs,
        });
        t_prev = seq.times[i];
    }
    Ok(ForwardTrace { visits })
}
