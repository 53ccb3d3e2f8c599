//! Adam with coupled L2 weight decay and the step-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Anything exposing a flat list of trainable parameter slices in a fixed order.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&[f64]>;
    fn parameters_mut(&mut self) -> Vec<&mut [f64]>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            first_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params<P: Parameterized + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let shapes: Vec<usize> = params.parameters().iter().map(|p| p.len()).collect();
        Self::new(config, &shapes)
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }
}

/// One Adam update. The weight-decay term is added to the gradient before the
/// moment updates (L2 regularization, not decoupled decay).
pub fn adam_step(params: Vec<&mut [f64]>, grads: &[&[f64]], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.first_moment.len() {
        return Err(Error::shape(
            "adam_step tensor count",
            state.first_moment.len(),
            format!("{} params / {} grads", params.len(), grads.len()),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.first_moment[i].len() {
            return Err(Error::shape(
                "adam_step tensor size",
                state.first_moment[i].len(),
                format!("{} params / {} grads", p.len(), g.len()),
            ));
        }
    }

    state.step += 1;
    let AdamConfig {
        lr,
        weight_decay,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.step as i32;
    let bias1 = 1.0 - beta1.powi(t);
    let bias2 = 1.0 - beta2.powi(t);

    for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
        let m = &mut state.first_moment[i];
        let v = &mut state.second_moment[i];
        for j in 0..p.len() {
            let grad = g[j] + weight_decay * p[j];
            m[j] = beta1 * m[j] + (1.0 - beta1) * grad;
            v[j] = beta2 * v[j] + (1.0 - beta2) * grad * grad;
            let m_hat = m[j] / bias1;
            let v_hat = v[j] / bias2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Learning rate shrunk by 10% every 10 epochs: `base · 0.9^⌊epoch/10⌋`.
pub fn lr_schedule(epoch: usize, base_lr: f64) -> f64 {
    step_decay(epoch, base_lr, 0.9, 10)
}

pub fn step_decay(epoch: usize, base_lr: f64, factor: f64, every: usize) -> f64 {
    base_lr * factor.powi((epoch / every.max(1)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamConfig {
        AdamConfig {
            weight_decay: wd,
            ..AdamConfig::default()
        }
    }

    #[test]
    fn zero_gradient_without_decay_leaves_params() {
        let mut state = AdamState::new(cfg(0.0), &[3]);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(vec![&mut p], &[&[0.0, 0.0, 0.0]], &mut state).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_with_decay_shrinks_toward_zero() {
        let mut state = AdamState::new(cfg(5e-4), &[2]);
        let mut p = vec![1.0, -1.0];
        for _ in 0..3 {
            adam_step(vec![&mut p], &[&[0.0, 0.0]], &mut state).unwrap();
        }
        assert!(p[0] < 1.0 && p[0] > 0.0);
        assert!(p[1] > -1.0 && p[1] < 0.0);
    }

    #[test]
    fn first_step_moves_against_gradient() {
        let mut state = AdamState::new(cfg(0.0), &[1]);
        let mut p = vec![0.0];
        adam_step(vec![&mut p], &[&[1.0]], &mut state).unwrap();
        assert!(p[0] < 0.0);
        // Bias-corrected first step has magnitude lr·g/(|g|+eps).
        assert!((p[0] + 1e-3 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn matches_scalar_reference_trace() {
        // Independent oracle: textbook scalar Adam, written out longhand.
        let grads = [0.5, -1.5, 2.0, 0.1, -0.3];
        let (lr, wd, b1, b2, eps) = (1e-2, 5e-4, 0.9, 0.999, 1e-8);
        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for (t, g) in grads.iter().enumerate() {
            let g = g + wd * x;
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32 + 1));
            let vh = v / (1.0 - b2.powi(t as i32 + 1));
            x -= lr * mh / (vh.sqrt() + eps);
            expected.push(x);
        }

        let mut state = AdamState::new(
            AdamConfig {
                lr,
                weight_decay: wd,
                beta1: b1,
                beta2: b2,
                eps,
            },
            &[1],
        );
        let mut p = vec![0.7];
        for (g, want) in grads.iter().zip(&expected) {
            adam_step(vec![&mut p], &[&[*g]], &mut state).unwrap();
            assert!((p[0] - want).abs() < 1e-15);
        }
        assert_eq!(state.step, 5);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = AdamState::new(cfg(0.0), &[2]);
        let mut p = vec![0.0; 3];
        assert!(adam_step(vec![&mut p], &[&[0.0; 3]], &mut state).is_err());
        assert_eq!(state.step, 0);
    }

    #[test]
    fn schedule_decays_every_ten_epochs() {
        assert_eq!(lr_schedule(0, 1e-3), 1e-3);
        assert!((lr_schedule(9, 1e-3) - 1e-3).abs() < 1e-18);
        assert!((lr_schedule(10, 1e-3) - 9e-4).abs() < 1e-15);
        assert!((lr_schedule(25, 1e-3) - 8.1e-4).abs() < 1e-15);
    }
}
