use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::layers::Real;
use crate::model::{Grads, ParamRole, ParamStore};

/// LARS hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LarsConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Scales the layer-wise trust ratio `||w|| / (||g|| + wd ||w||)`.
    pub trust_coefficient: f64,
}

impl Default for LarsConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-6,
            trust_coefficient: 1e-3,
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LarsState {
    pub momentum: Vec<Vec<f32>>,
}

impl LarsState {
    pub fn new(params: &ParamStore) -> Self {
        Self {
            momentum: params.zero_grads(),
        }
    }
}

fn norm<T: Real>(v: &[T]) -> f64 {
    v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN).powi(2)).sum::<f64>().sqrt()
}

/// Updates one tensor in place and returns the trust ratio used.
///
/// `adapt` selects LARS treatment; when false the tensor takes a plain
/// momentum step without weight decay. All arithmetic is in f64.
pub fn lars_update<T: Real>(weights: &mut [T], grad: &[T], velocity: &mut [T], lr: f64, cfg: &LarsConfig, adapt: bool) -> f64 {
    let f = |x: T| x.to_f64().unwrap_or(f64::NAN);
    let back = |x: f64| T::from(x).unwrap_or(T::nan());
    let wd = if adapt { cfg.weight_decay } else { 0.0 };
    let trust = if adapt {
        let (wn, gn) = (norm(weights), norm(grad));
        if wn > 0.0 && gn > 0.0 {
            cfg.trust_coefficient * wn / (gn + cfg.weight_decay * wn)
        } else {
            1.0
        }
    } else {
        1.0
    };
    for ((w, &g), v) in weights.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let step = f(g) + wd * f(*w);
        let nv = cfg.momentum * f(*v) + trust * step;
        *v = back(nv);
        *w = back(f(*w) - lr * nv);
    }
    trust
}

/// One optimizer step over every tensor of `params`. Weights are adapted,
/// biases and normalization parameters are not. Nothing is modified when any
/// gradient is non-finite.
pub fn lars_step(params: &mut ParamStore, grads: &Grads, state: &mut LarsState, lr: f64, cfg: &LarsConfig) -> Result<Vec<f64>> {
    if grads.len() != params.len() || state.momentum.len() != params.len() {
        return Err(Error::Shape("gradient or momentum buffers do not match the parameters".into()));
    }
    for (p, g) in params.params.iter().zip(grads) {
        if g.len() != p.data.len() {
            return Err(Error::Shape(format!("gradient for `{}` has {} values, expected {}", p.name, g.len(), p.data.len())));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of `{}` at index {i} is {}", p.name, g[i])));
        }
    }
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config("lr", format!("{lr} is not a finite nonnegative rate")));
    }
    Ok(params
        .params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.momentum)
        .map(|((p, g), v)| lars_update(&mut p.data, g, v, lr, cfg, p.role == ParamRole::Weight))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, NextChannelEncoder};

    #[test]
    fn unit_norm_single_tensor_step() {
        let cfg = LarsConfig { momentum: 0.0, weight_decay: 0.0, trust_coefficient: 1.0 };
        let mut w = vec![0.6f64, 0.8];
        let g = vec![0.0f64, 1.0];
        let mut v = vec![0.0; 2];
        let trust = lars_update(&mut w, &g, &mut v, 0.1, &cfg, true);
        assert_eq!(trust, 1.0);
        assert!((w[0] - 0.6).abs() < 1e-12);
        assert!((w[1] - 0.7).abs() < 1e-12);
    }

    #[test]
    fn trust_ratio_formula_with_decay_and_momentum() {
        let cfg = LarsConfig { momentum: 0.9, weight_decay: 0.5, trust_coefficient: 0.01 };
        let mut w = vec![3.0f64, 4.0];
        let g = vec![0.0f64, 2.0];
        let mut v = vec![1.0, -1.0];
        let trust = lars_update(&mut w, &g, &mut v, 0.2, &cfg, true);
        // ||w|| = 5, ||g|| = 2 -> 0.01 * 5 / (2 + 2.5)
        let t = 0.05 / 4.5;
        assert!((trust - t).abs() < 1e-15);
        let v0 = 0.9 * 1.0 + t * (0.0 + 0.5 * 3.0);
        let v1 = 0.9 * -1.0 + t * (2.0 + 0.5 * 4.0);
        assert!((v[0] - v0).abs() < 1e-15 && (v[1] - v1).abs() < 1e-15);
        assert!((w[0] - (3.0 - 0.2 * v0)).abs() < 1e-15);
        assert!((w[1] - (4.0 - 0.2 * v1)).abs() < 1e-15);
    }

    #[test]
    fn zero_weights_fall_back_to_sgd() {
        let cfg = LarsConfig { momentum: 0.0, weight_decay: 1e-6, trust_coefficient: 1e-3 };
        let mut w = vec![0.0f64; 3];
        let g = vec![1.0, -2.0, 0.5];
        let mut v = vec![0.0; 3];
        assert_eq!(lars_update(&mut w, &g, &mut v, 0.1, &cfg, true), 1.0);
        assert_eq!(w, vec![-0.1, 0.2, -0.05]);
    }

    #[test]
    fn zero_rate_keeps_parameters_and_updates_momentum() {
        let mut enc = NextChannelEncoder::build(&ModelConfig::for_channels(2), 0).unwrap();
        let before = enc.params().clone();
        let grads: Grads = before.params.iter().map(|p| vec![0.25; p.data.len()]).collect();
        let mut state = LarsState::new(&before);
        lars_step(enc.params_mut(), &grads, &mut state, 0.0, &LarsConfig::default()).unwrap();
        assert_eq!(enc.params(), &before);
        assert!(state.momentum.iter().flatten().all(|&v| v > 0.0));
    }

    #[test]
    fn biases_and_norms_skip_adaptation_and_decay() {
        let mut enc = NextChannelEncoder::build(&ModelConfig::for_channels(2), 0).unwrap();
        let before = enc.params().clone();
        let grads: Grads = before.params.iter().map(|p| vec![1.0; p.data.len()]).collect();
        let mut state = LarsState::new(&before);
        let cfg = LarsConfig { momentum: 0.0, weight_decay: 0.1, trust_coefficient: 1e-3 };
        let trust = lars_step(enc.params_mut(), &grads, &mut state, 0.5, &cfg).unwrap();
        for ((p, old), t) in enc.params().params.iter().zip(&before.params).zip(trust) {
            if p.role == ParamRole::Weight {
                assert!(t < 1.0);
            } else {
                assert_eq!(t, 1.0);
                for (a, b) in p.data.iter().zip(&old.data) {
                    assert!((a - (b - 0.5)).abs() < 1e-6, "{}", p.name);
                }
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_changes() {
        let mut enc = NextChannelEncoder::build(&ModelConfig::for_channels(2), 0).unwrap();
        let before = enc.params().clone();
        let mut grads = before.zero_grads();
        grads[3][0] = f32::NAN;
        let mut state = LarsState::new(&before);
        let err = lars_step(enc.params_mut(), &grads, &mut state, 1.0, &LarsConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite(ref m) if m.contains(&before.params[3].name)));
        assert_eq!(enc.params(), &before);
    }
}
