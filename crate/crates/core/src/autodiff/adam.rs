use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{Gradients, Params, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first and second moments plus the shared step counter.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AdamError {
    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient for `{name}` has shape {grad:?}, parameter has {param:?}")]
    ShapeMismatch {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error("learning rate must be positive, got {0}")]
    InvalidLearningRate(f64),
}

/// One bias-corrected Adam update. Parameters without a gradient entry are
/// treated as having zero gradient. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut Params, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<(), AdamError> {
    if !(lr > 0.0) {
        return Err(AdamError::InvalidLearningRate(lr));
    }
    for (name, p) in params.iter() {
        if let Some(g) = grads.get(name) {
            if g.shape() != p.shape() {
                return Err(AdamError::ShapeMismatch {
                    name: name.clone(),
                    param: p.shape().to_vec(),
                    grad: g.shape().to_vec(),
                });
            }
            if !g.is_finite() {
                return Err(AdamError::NonFiniteGradient(name.clone()));
            }
        }
    }
    let AdamConfig { beta1, beta2, eps } = state.config;
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (name, p) in params.iter_mut() {
        let m = state
            .first
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let v = state
            .second
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(p.shape()));
        let g = grads.get(name);
        for i in 0..p.len() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            let mi = beta1 * m.data()[i] + (1.0 - beta1) * gi;
            let vi = beta2 * v.data()[i] + (1.0 - beta2) * gi * gi;
            m.data_mut()[i] = mi;
            v.data_mut()[i] = vi;
            let update = lr * (mi / c1) / ((vi / c2).sqrt() + eps);
            p.data_mut()[i] -= update;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> Params {
        let mut p = Params::new();
        p.insert("w", Tensor::full(&[3], v));
        p
    }

    fn grads(v: f64) -> Gradients {
        let mut g = Gradients::new();
        g.insert("w".into(), Tensor::full(&[3], v));
        g
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = one_param(1.0);
        let mut s = AdamState::new(AdamConfig::default());
        adam_step(&mut p, &grads(0.5), &mut s, 1e-3).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        let expected = 1.0 - 1e-3 * 0.5 / (0.5 + 1e-8);
        for v in p.get("w").unwrap().data() {
            assert!((v - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_gradient_leaves_params_but_counts_step() {
        let mut p = one_param(2.0);
        let mut s = AdamState::new(AdamConfig::default());
        adam_step(&mut p, &grads(0.0), &mut s, 1e-3).unwrap();
        adam_step(&mut p, &grads(0.0), &mut s, 1e-3).unwrap();
        assert_eq!(s.step, 2);
        assert!(p.get("w").unwrap().data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn moments_decay_under_zero_gradient() {
        let mut p = one_param(0.0);
        let mut s = AdamState::new(AdamConfig::default());
        adam_step(&mut p, &grads(1.0), &mut s, 1e-3).unwrap();
        let m1 = s.first["w"].data()[0];
        let before = p.clone();
        adam_step(&mut p, &grads(0.0), &mut s, 1e-3).unwrap();
        assert!((s.first["w"].data()[0] - 0.9 * m1).abs() < 1e-15);
        // Momentum keeps moving the parameter even though the gradient is zero.
        assert_ne!(p, before);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = one_param(0.0);
        let mut s = AdamState::new(AdamConfig::default());
        let err = adam_step(&mut p, &grads(f64::NAN), &mut s, 1e-3).unwrap_err();
        assert_eq!(err, AdamError::NonFiniteGradient("w".into()));
        assert_eq!(s.step, 0);
    }
}
