//! Trajectory decoder and the masked merge that fills unobserved entries.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifold::TangentVector;
use crate::tensor::{glorot_uniform, lower_len, Matrix, ParamId, ParamStore, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecoderActivation {
    /// Keeps estimates inside the normalized `[0, 1]` range.
    #[default]
    Sigmoid,
    Identity,
}

/// Single fully connected layer from the flattened tangent to `c` features.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub w: ParamId,
    pub b: ParamId,
    pub dim: usize,
    pub features: usize,
    pub activation: DecoderActivation,
}

impl DecoderParams {
    pub fn init(
        store: &mut ParamStore,
        dim: usize,
        features: usize,
        activation: DecoderActivation,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            w: store.add("decoder.w", glorot_uniform(features, lower_len(dim), rng)),
            b: store.add("decoder.b", Matrix::zeros(features, 1)),
            dim,
            features,
            activation,
        }
    }

    /// `f_psi(H')` as a `c x 1` column.
    pub fn decode(&self, t: &mut Tape, store: &ParamStore, tangent: Var) -> Result<Var> {
        if t.shape(tangent) != (self.dim, self.dim) {
            return Err(Error::ShapeMismatch {
                op: "decode",
                left: t.shape(tangent),
                right: (self.dim, self.dim),
            });
        }
        let flat = t.flatten_lower(tangent)?;
        let w = t.param_of(store, self.w);
        let b = t.param_of(store, self.b);
        let y = t.matmul(w, flat)?;
        let y = t.add(y, b)?;
        Ok(match self.activation {
            DecoderActivation::Sigmoid => t.sigmoid(y),
            DecoderActivation::Identity => y,
        })
    }
}

/// Validates a 0/1 mask of the given length.
pub fn check_mask(mask: &[f64], len: usize) -> Result<()> {
    if mask.len() != len {
        return Err(Error::ShapeMismatch {
            op: "mask",
            left: (mask.len(), 1),
            right: (len, 1),
        });
    }
    if let Some((i, &v)) = mask.iter().enumerate().find(|(_, &v)| v != 0.0 && v != 1.0) {
        return Err(Error::Domain { op: "mask", index: i, value: v });
    }
    Ok(())
}

/// `m ⊙ s + (1 - m) ⊙ decoded` with observed entries copied bit-exactly.
/// Unobserved placeholders (typically NaN) never reach the arithmetic.
pub fn masked_estimate_graph(t: &mut Tape, s_partial: &[f64], mask: &[f64], decoded: Var) -> Result<Var> {
    check_mask(mask, s_partial.len())?;
    let clean: Vec<f64> = s_partial
        .iter()
        .zip(mask)
        .map(|(&s, &m)| if m == 1.0 { s } else { 0.0 })
        .collect();
    let observed = t.constant(Matrix::column(&clean));
    t.select(&Matrix::column(mask), observed, decoded)
}

/// Value-level decoder.
pub fn decode(tangent: &TangentVector, params: &DecoderParams, store: &ParamStore) -> Result<Vec<f64>> {
    let mut t = Tape::inference();
    let v = t.constant(tangent.as_matrix().clone());
    let y = params.decode(&mut t, store, v)?;
    Ok(t.value(y).data().to_vec())
}

/// Value-level masked merge.
pub fn masked_estimate(
    s_partial: &[f64],
    mask: &[f64],
    tangent: &TangentVector,
    params: &DecoderParams,
    store: &ParamStore,
) -> Result<Vec<f64>> {
    let mut t = Tape::inference();
    let v = t.constant(tangent.as_matrix().clone());
    let y = params.decode(&mut t, store, v)?;
    let s = masked_estimate_graph(&mut t, s_partial, mask, y)?;
    Ok(t.value(s).data().to_vec())
}
