use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect();
        AdamState {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= c;
            }
        }
    }
    norm
}

/// One AdamW update with decoupled weight decay and bias-corrected moments:
///
/// ```text
/// p ← p·(1 − lr·wd) − lr · m̂ / (√v̂ + eps)
/// ```
///
/// Fails without touching any parameter if a gradient is not finite.
pub fn adamw_step(params: &mut ParamStore, grads: &[Tensor], state: &mut AdamState, cfg: &AdamWConfig) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (i, g) in grads.iter().enumerate() {
        if g.shape() != params.tensors()[i].shape() {
            return Err(Error::shape("adamw_step", g.shape(), params.tensors()[i].shape()));
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient {
                param: params.names()[i].clone(),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.learning_rate * cfg.weight_decay;
    for (i, p) in params.tensors_mut().iter_mut().enumerate() {
        let g = grads[i].data();
        let m = state.m[i].data_mut();
        for (mj, gj) in m.iter_mut().zip(g) {
            *mj = cfg.beta1 * *mj + (1.0 - cfg.beta1) * gj;
        }
        let v = state.v[i].data_mut();
        for (vj, gj) in v.iter_mut().zip(g) {
            *vj = cfg.beta2 * *vj + (1.0 - cfg.beta2) * gj * gj;
        }
        let (m, v) = (state.m[i].data(), state.v[i].data());
        for (j, pj) in p.data_mut().iter_mut().enumerate() {
            let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + cfg.eps);
            *pj = *pj * decay - cfg.learning_rate * update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(v));
        s
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let mut p = store(1.5);
        let mut st = AdamState::new(&p);
        for _ in 0..3 {
            adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, &AdamWConfig::default()).unwrap();
        }
        assert_eq!(p.tensors()[0].item().unwrap(), 1.5);
    }

    #[test]
    fn first_step_has_learning_rate_magnitude() {
        for g in [1e-3, 0.5, 7.0, -2.0] {
            let mut p = store(0.0);
            let mut st = AdamState::new(&p);
            let cfg = AdamWConfig {
                learning_rate: 0.01,
                ..AdamWConfig::default()
            };
            adamw_step(&mut p, &[Tensor::scalar(g)], &mut st, &cfg).unwrap();
            let step = p.tensors()[0].item().unwrap();
            let expect = -0.01 * g / (g.abs() + cfg.eps);
            assert!((step - expect).abs() < 1e-15);
            assert!((step.abs() - 0.01).abs() < 1e-7);
        }
    }

    #[test]
    fn weight_decay_shrinks_multiplicatively() {
        let mut p = store(2.0);
        let mut st = AdamState::new(&p);
        let cfg = AdamWConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..AdamWConfig::default()
        };
        adamw_step(&mut p, &[Tensor::scalar(0.0)], &mut st, &cfg).unwrap();
        assert_eq!(p.tensors()[0].item().unwrap(), 2.0 * (1.0 - 0.05));
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = store(1.0);
        let mut st = AdamState::new(&p);
        let err = adamw_step(&mut p, &[Tensor::scalar(f64::NAN)], &mut st, &AdamWConfig::default()).unwrap_err();
        assert!(matches!(&err, Error::NonFiniteGradient { param } if param == "w"));
        assert_eq!(st.step, 0);
        assert_eq!(p.tensors()[0].item().unwrap(), 1.0);
    }

    #[test]
    fn clipping() {
        let mut g = vec![Tensor::from_rows(&[[3.0, 4.0]]).unwrap()];
        assert_eq!(clip_grad_norm(&mut g, 1.0), 5.0);
        assert!((g[0].norm() - 1.0).abs() < 1e-15);
        assert_eq!(clip_grad_norm(&mut g, 2.0), g[0].norm());
    }
}
