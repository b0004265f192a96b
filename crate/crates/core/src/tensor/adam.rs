use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Coupled l2 penalty: `weight_decay * w` is added to the gradient.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = params
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update from the gradients currently held in `params`.
    ///
    /// All gradients are validated before any parameter is touched.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        for p in params.iter() {
            if !p.grad.all_finite() {
                return Err(Error::NonFiniteGrad {
                    param: p.name.clone(),
                });
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let w = p.value.data_mut();
            for (i, &g0) in p.grad.data().iter().enumerate() {
                let g = g0 + weight_decay * w[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// One Adam update with explicit hyperparameters on a fresh optimizer state.
pub fn adam_step(
    params: &mut ParamStore,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
    weight_decay: f64,
) -> Result<()> {
    let cfg = AdamConfig {
        lr,
        beta1: betas.0,
        beta2: betas.1,
        eps,
        weight_decay,
    };
    Adam::new(cfg, params).step(params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;

    fn quadratic_grad(store: &mut ParamStore, target: &Matrix) {
        let id = store.iter().next().unwrap().id;
        let mut t = Tape::new();
        let w = t.param_of(store, id);
        let c = t.constant(target.clone());
        let d = t.sub(w, c).unwrap();
        let sq = t.square(d);
        let s = t.sum(sq);
        t.backward(s).unwrap().accumulate_into(store);
    }

    #[test]
    fn single_step_descends() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::scalar(1.0));
        quadratic_grad(&mut store, &Matrix::scalar(0.0));
        adam_step(&mut store, 0.1, (0.9, 0.999), 1e-8, 0.0).unwrap();
        assert!(store.value(id).item() < 1.0);
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::column(&[0.3, -1.2]));
        adam_step(&mut store, 0.1, (0.9, 0.999), 1e-8, 0.0).unwrap();
        assert_eq!(store.value(id).data(), &[0.3, -1.2]);
    }

    #[test]
    fn weight_decay_alone_shrinks() {
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::column(&[0.5, -0.5]));
        adam_step(&mut store, 0.01, (0.9, 0.999), 1e-8, 1e-2).unwrap();
        let w = store.value(id).data();
        assert!(w[0] < 0.5 && w[1] > -0.5);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let target = Matrix::column(&[1.5, -2.0, 0.25]);
        let mut store = ParamStore::new();
        let id = store.add("w", Matrix::zeros(3, 1));
        let cfg = AdamConfig {
            lr: 0.05,
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        let mut opt = Adam::new(cfg, &store);
        let mut converged_at = None;
        for step in 0..2000 {
            store.zero_grads();
            quadratic_grad(&mut store, &target);
            opt.step(&mut store).unwrap();
            if store.value(id).max_abs_diff(&target) < 1e-3 {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some(), "did not converge: {:?}", store.value(id));
    }

    #[test]
    fn non_finite_grad_names_param() {
        let mut store = ParamStore::new();
        let id = store.add("encoder.w1", Matrix::scalar(1.0));
        store.get_mut(id).grad = Matrix::scalar(f64::NAN);
        match adam_step(&mut store, 0.1, (0.9, 0.999), 1e-8, 0.0) {
            Err(Error::NonFiniteGrad { param }) => assert_eq!(param, "encoder.w1"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.value(id).item(), 1.0);
    }
}
