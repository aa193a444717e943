use serde::{Deserialize, Serialize};

use super::params::ParamVector;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First/second moment estimates and step count. A fresh state has empty moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn fresh() -> Self {
        Self::default()
    }
}

/// One bias-corrected Adam update. Returns the new parameters and the advanced state.
pub fn adam_step(
    state: &AdamState,
    params: &ParamVector,
    grads: &ParamVector,
    lr: f64,
    cfg: AdamConfig,
) -> Result<(ParamVector, AdamState)> {
    if params.len() != grads.len() {
        return Err(Error::shape("adam_step (params vs grads)", params.len(), grads.len()));
    }
    let n = params.len();
    let (mut m, mut v) = if state.step == 0 && state.m.is_empty() {
        (vec![0.0; n], vec![0.0; n])
    } else {
        if state.m.len() != n || state.v.len() != n {
            return Err(Error::shape("adam_step (state vs params)", state.m.len(), n));
        }
        (state.m.clone(), state.v.clone())
    };
    let step = state.step + 1;
    let bc1 = 1.0 - cfg.beta1.powi(step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(step as i32);
    let mut out = params.clone();
    for (i, p) in out.as_mut_slice().iter_mut().enumerate() {
        let g = grads.as_slice()[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok((out, AdamState { m, v, step }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let p = ParamVector::from_vec(vec![1.0, -2.0, 3.0]);
        let (q, s) = adam_step(
            &AdamState::fresh(),
            &p,
            &ParamVector::zeros(3),
            0.1,
            AdamConfig::default(),
        )
        .unwrap();
        assert!(q.bitwise_eq(&p));
        assert_eq!(s.step, 1);
    }

    #[test]
    fn first_step_is_lr_times_sign() {
        // m_hat = g, v_hat = g^2 after bias correction, so the step is lr*g/(|g|+eps).
        let p = ParamVector::from_vec(vec![0.0, 0.0, 0.0]);
        let g = ParamVector::from_vec(vec![0.3, -5.0, 1e-2]);
        let lr = 0.01;
        let (q, _) = adam_step(&AdamState::fresh(), &p, &g, lr, AdamConfig::default()).unwrap();
        for (qi, gi) in q.as_slice().iter().zip(g.as_slice()) {
            let expected = -lr * gi / (gi.abs() + 1e-8);
            assert!((qi - expected).abs() < 1e-12);
            assert!((qi + lr * gi.signum()).abs() < 1e-6 * lr.max(1.0));
        }
    }

    #[test]
    fn deterministic_and_shape_checked() {
        let p = ParamVector::from_vec(vec![0.5, 0.25]);
        let g = ParamVector::from_vec(vec![0.1, -0.2]);
        let cfg = AdamConfig::default();
        let (a, sa) = adam_step(&AdamState::fresh(), &p, &g, 0.01, cfg).unwrap();
        let (b, sb) = adam_step(&AdamState::fresh(), &p, &g, 0.01, cfg).unwrap();
        assert!(a.bitwise_eq(&b));
        assert_eq!(sa, sb);
        let (a2, _) = adam_step(&sa, &a, &g, 0.01, cfg).unwrap();
        let (b2, _) = adam_step(&sb, &b, &g, 0.01, cfg).unwrap();
        assert!(a2.bitwise_eq(&b2));
        assert!(adam_step(&sa, &ParamVector::zeros(3), &ParamVector::zeros(3), 0.01, cfg).is_err());
        assert!(adam_step(&AdamState::fresh(), &p, &ParamVector::zeros(1), 0.01, cfg).is_err());
    }
}
