//! Adam with global-norm clipping and decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;

/// A list of flat tensors updated in lockstep.
pub trait TensorSet: Clone {
    fn tensor_refs(&self) -> Vec<&Vec<f64>>;
    fn tensor_refs_mut(&mut self) -> Vec<&mut Vec<f64>>;

    fn zeroed(&self) -> Self {
        let mut z = self.clone();
        for t in z.tensor_refs_mut() {
            t.fill(0.0);
        }
        z
    }
}

impl TensorSet for ModelParams {
    fn tensor_refs(&self) -> Vec<&Vec<f64>> {
        self.tensors()
    }

    fn tensor_refs_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.tensors_mut()
    }
}

impl TensorSet for Vec<Vec<f64>> {
    fn tensor_refs(&self) -> Vec<&Vec<f64>> {
        self.iter().collect()
    }

    fn tensor_refs_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Non-positive disables clipping.
    pub grad_clip_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<P> {
    pub m: P,
    pub v: P,
    /// Number of updates applied so far.
    pub t: u64,
}

impl<P: TensorSet> AdamState<P> {
    pub fn new(like: &P) -> Self {
        AdamState {
            m: like.zeroed(),
            v: like.zeroed(),
            t: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

/// Index of the first tensor holding a non-finite gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonFinite {
    pub tensor: usize,
    pub grad_norm: f64,
}

pub fn global_norm<P: TensorSet>(grads: &P) -> f64 {
    grads
        .tensor_refs()
        .iter()
        .flat_map(|t| t.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// One Adam update at learning rate `lr`. Gradients are first rescaled so
/// their global norm is at most `grad_clip_norm`; weight decay is applied
/// as `-lr * weight_decay * param` alongside the adaptive step. Nothing is
/// modified when a gradient is non-finite.
pub fn adam_step<P: TensorSet>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<P>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<StepStats, NonFinite> {
    let grad_norm = global_norm(grads);
    let gs = grads.tensor_refs();
    if !grad_norm.is_finite() {
        let tensor = gs.iter().position(|t| t.iter().any(|g| !g.is_finite())).unwrap_or(0);
        return Err(NonFinite { tensor, grad_norm });
    }
    let clip_scale = if cfg.grad_clip_norm > 0.0 && grad_norm > cfg.grad_clip_norm {
        cfg.grad_clip_norm / grad_norm
    } else {
        1.0
    };
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let ps = params.tensor_refs_mut();
    let ms = state.m.tensor_refs_mut();
    let vs = state.v.tensor_refs_mut();
    for (((p, g), m), v) in ps.into_iter().zip(gs).zip(ms).zip(vs) {
        for i in 0..p.len() {
            let g = g[i] * clip_scale;
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
            let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + cfg.eps);
            p[i] -= lr * (update + cfg.weight_decay * p[i]);
        }
    }
    Ok(StepStats { grad_norm, clip_scale })
}

#[cfg(test)]
mod tests {
    use super::*;

    const CFG: AdamConfig = AdamConfig {
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
        grad_clip_norm: 0.0,
    };

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![vec![1.5, -2.0], vec![0.25]];
        let before = p.clone();
        let g = p.zeroed();
        let mut s = AdamState::new(&p);
        for _ in 0..5 {
            adam_step(&mut p, &g, &mut s, &CFG, 0.1).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn scalar_trace_matches_hand_computation() {
        // With a constant gradient the bias-corrected moments are exactly
        // g and g^2, so each step moves by lr * 1 / (1 + eps).
        let mut p = vec![vec![0.0]];
        let g = vec![vec![1.0]];
        let mut s = AdamState::new(&p);
        for t in 1..=3 {
            adam_step(&mut p, &g, &mut s, &CFG, 0.01).unwrap();
            let expected = -0.01 * t as f64 / (1.0 + 1e-8);
            assert!((p[0][0] - expected).abs() < 1e-15, "step {t}: {} vs {expected}", p[0][0]);
        }
        assert!((p[0][0] + 0.03).abs() < 1e-9);
        assert!((s.m[0][0] - 0.271).abs() < 1e-12);
        assert!((s.v[0][0] - 0.002997001).abs() < 1e-12);
    }

    #[test]
    fn clipping_scales_gradient() {
        let cfg = AdamConfig {
            grad_clip_norm: 1.0,
            ..CFG
        };
        let mut p = vec![vec![0.0, 0.0]];
        let g = vec![vec![6.0, 8.0]];
        let mut s = AdamState::new(&p);
        let stats = adam_step(&mut p, &g, &mut s, &cfg, 0.01).unwrap();
        assert_eq!(stats.grad_norm, 10.0);
        assert!((stats.clip_scale - 0.1).abs() < 1e-15);
        assert!((s.m[0][0] - 0.1 * 0.6).abs() < 1e-15);
        assert!((s.m[0][1] - 0.1 * 0.8).abs() < 1e-15);
    }

    #[test]
    fn decoupled_weight_decay() {
        let cfg = AdamConfig {
            weight_decay: 0.5,
            ..CFG
        };
        let mut p = vec![vec![2.0]];
        let g = p.zeroed();
        let mut s = AdamState::new(&p);
        adam_step(&mut p, &g, &mut s, &cfg, 0.1).unwrap();
        assert!((p[0][0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_aborts_untouched() {
        let mut p = vec![vec![1.0], vec![2.0]];
        let g = vec![vec![0.5], vec![f64::NAN]];
        let mut s = AdamState::new(&p);
        let err = adam_step(&mut p, &g, &mut s, &CFG, 0.1).unwrap_err();
        assert_eq!(err.tensor, 1);
        assert_eq!(p, vec![vec![1.0], vec![2.0]]);
        assert_eq!(s.t, 0);
    }
}
