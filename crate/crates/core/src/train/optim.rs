use std::collections::HashMap;

use super::{OptimizerKind, TrainConfig};
use crate::error::{contract, Result};
use crate::linalg::Matrix;
use crate::model::MicroTransformer;

/// One SGD step with heavy-ball momentum and L2 weight decay:
/// `v ← μ v + g + λ p`, `p ← p − lr v`.
pub fn sgd_step(
    param: &mut Matrix,
    grad: &Matrix,
    velocity: &mut Matrix,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    param.expect_same_shape(grad, "sgd_step")?;
    param.expect_same_shape(velocity, "sgd_step")?;
    let p = param.as_mut_slice();
    let v = velocity.as_mut_slice();
    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(grad.as_slice()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p -= lr * *v;
    }
    Ok(())
}

/// First and second moment estimates of one tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Matrix,
    pub v: Matrix,
}

impl AdamState {
    pub fn zeros_like(p: &Matrix) -> Self {
        Self {
            m: Matrix::zeros(p.rows(), p.cols()),
            v: Matrix::zeros(p.rows(), p.cols()),
        }
    }
}

/// One AdamW step at 1-based step `t`: decoupled decay `p ← p − lr λ p`,
/// then the bias-corrected Adam update.
#[allow(clippy::too_many_arguments)]
pub fn adamw_step(
    param: &mut Matrix,
    grad: &Matrix,
    state: &mut AdamState,
    lr: f64,
    betas: [f64; 2],
    eps: f64,
    weight_decay: f64,
    t: u64,
) -> Result<()> {
    if t == 0 {
        return Err(contract("adamw step counter starts at 1"));
    }
    param.expect_same_shape(grad, "adamw_step")?;
    let [b1, b2] = betas;
    let c1 = 1.0 - b1.powf(t as f64);
    let c2 = 1.0 - b2.powf(t as f64);
    let p = param.as_mut_slice();
    let m = state.m.as_mut_slice();
    let v = state.v.as_mut_slice();
    for (((p, m), v), g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(grad.as_slice()) {
        *p -= lr * weight_decay * *p;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
    Ok(())
}

/// Per-parameter optimiser state keyed by parameter name.
#[derive(Debug)]
pub struct Optimizer {
    config: TrainConfig,
    velocity: HashMap<String, Matrix>,
    adam: HashMap<String, AdamState>,
    t: u64,
}

impl Optimizer {
    pub fn new(config: &TrainConfig) -> Self {
        Self {
            config: config.clone(),
            velocity: HashMap::new(),
            adam: HashMap::new(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Applies one update to every parameter that has a gradient. Parameters
    /// without a gradient (frozen) are not touched, not even by weight decay.
    pub fn step(&mut self, model: &mut MicroTransformer, grads: &[(String, Matrix)], lr: f64) -> Result<()> {
        self.t += 1;
        let by_name: HashMap<&str, &Matrix> = grads.iter().map(|(n, g)| (n.as_str(), g)).collect();
        let cfg = &self.config;
        let t = self.t;
        let mut result = Ok(());
        let velocity = &mut self.velocity;
        let adam = &mut self.adam;
        model.visit_params_mut(&mut |name, p, _| {
            if result.is_err() {
                return;
            }
            let Some(g) = by_name.get(name.as_str()) else {
                return;
            };
            result = match cfg.optimizer {
                OptimizerKind::Sgd => {
                    let v = velocity
                        .entry(name)
                        .or_insert_with(|| Matrix::zeros(p.rows(), p.cols()));
                    sgd_step(p, g, v, lr, cfg.momentum, cfg.weight_decay)
                }
                OptimizerKind::AdamW => {
                    let s = adam.entry(name).or_insert_with(|| AdamState::zeros_like(p));
                    adamw_step(p, g, s, lr, cfg.betas, cfg.eps, cfg.weight_decay, t)
                }
            };
        });
        result
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Matrix {
        Matrix::filled(1, 1, v)
    }

    #[test]
    fn sgd_hand_step_and_zero_lr() {
        let mut p = scalar(1.0);
        let mut v = scalar(0.0);
        sgd_step(&mut p, &scalar(2.0), &mut v, 0.1, 0.0, 0.0).unwrap();
        assert!((p[(0, 0)] - 0.8).abs() < 1e-15);

        let mut p = scalar(1.0);
        sgd_step(&mut p, &scalar(2.0), &mut scalar(0.0), 0.0, 0.9, 0.1).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
    }

    #[test]
    fn sgd_momentum_on_quadratic_matches_recurrence() {
        // f(p) = 0.5 a p², g = a p.
        let (a, lr, mu, wd) = (3.0, 0.05, 0.9, 0.01);
        let mut p = scalar(2.0);
        let mut v = scalar(0.0);
        let (mut pr, mut vr) = (2.0f64, 0.0f64);
        for _ in 0..3 {
            let g = scalar(a * p[(0, 0)]);
            sgd_step(&mut p, &g, &mut v, lr, mu, wd).unwrap();
            vr = mu * vr + a * pr + wd * pr;
            pr -= lr * vr;
        }
        assert!((p[(0, 0)] - pr).abs() <= 1e-12);
    }

    #[test]
    fn adamw_examples() {
        // Zero gradient, no decay: unchanged.
        let mut p = scalar(1.0);
        let mut s = AdamState::zeros_like(&p);
        adamw_step(&mut p, &scalar(0.0), &mut s, 0.1, [0.9, 0.999], 1e-8, 0.0, 1).unwrap();
        assert_eq!(p[(0, 0)], 1.0);

        // Decoupled decay acts alone when g = 0.
        let mut p = scalar(1.0);
        let mut s = AdamState::zeros_like(&p);
        adamw_step(&mut p, &scalar(0.0), &mut s, 0.1, [0.9, 0.999], 1e-8, 0.1, 1).unwrap();
        assert!((p[(0, 0)] - 0.99).abs() < 1e-15);

        // First step with g = 1: m̂ = 1, v̂ = 1.
        let mut p = scalar(1.0);
        let mut s = AdamState::zeros_like(&p);
        adamw_step(&mut p, &scalar(1.0), &mut s, 0.1, [0.9, 0.999], 1e-8, 0.0, 1).unwrap();
        let reference = {
            let (m, v) = (0.1 * 1.0, 0.001 * 1.0);
            let (mh, vh) = (m / (1.0 - 0.9), v / (1.0 - 0.999));
            1.0 - 0.1 * mh / (f64::sqrt(vh) + 1e-8)
        };
        assert!((p[(0, 0)] - reference).abs() < 1e-15);
        assert!((p[(0, 0)] - 0.9).abs() < 1e-8);
    }

    #[test]
    fn adamw_rejects_step_zero() {
        let mut p = scalar(1.0);
        let mut s = AdamState::zeros_like(&p);
        assert!(adamw_step(&mut p, &scalar(1.0), &mut s, 0.1, [0.9, 0.999], 1e-8, 0.0, 0).is_err());
    }
}
