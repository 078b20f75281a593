//! Adam with optional global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment accumulators and step bookkeeping for one flat parameter vector.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    /// Global l2 clip threshold; a negative value disables clipping.
    pub clip: f64,
}

impl OptimState {
    pub fn new(n_params: usize, lr: f64, clip: f64) -> Self {
        Self {
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
            lr,
            clip,
        }
    }

    /// One bias-corrected update: clip, update moments, then
    /// `theta -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn adam_step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "optimizer sized for {} parameters, got {} params / {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient);
        }
        let scale = if self.clip >= 0.0 {
            let norm = global_norm(grads);
            if norm > self.clip && norm > 0.0 {
                self.clip / norm
            } else {
                1.0
            }
        } else {
            1.0
        };

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
        Ok(())
    }
}

/// Euclidean norm of a flat gradient vector.
pub fn global_norm(grads: &[f64]) -> f64 {
    grads.iter().map(|g| g * g).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradients_are_a_fixed_point() {
        let mut state = OptimState::new(3, 0.1, -1.0);
        let mut params = vec![1.0, -2.0, 0.5];
        let before = params.clone();
        state.adam_step(&mut params, &[0.0, 0.0, 0.0]).unwrap();
        assert_eq!(params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        // Bias correction makes m_hat / sqrt(v_hat) = 1 on the first step.
        let mut state = OptimState::new(1, 0.1, -1.0);
        let mut params = vec![3.0];
        state.adam_step(&mut params, &[1.0]).unwrap();
        assert!((params[0] - 2.9).abs() < 1e-8, "got {}", params[0]);
    }

    #[test]
    fn repeated_constant_gradient_keeps_unit_ratio() {
        let mut state = OptimState::new(1, 0.1, -1.0);
        let mut params = vec![0.0];
        for _ in 0..10 {
            state.adam_step(&mut params, &[1.0]).unwrap();
        }
        assert!((params[0] + 1.0).abs() < 1e-6, "got {}", params[0]);
    }

    #[test]
    fn clipping_halves_an_oversized_gradient() {
        // Norm-30 gradient against clip 15 behaves exactly like the
        // pre-halved gradient with clipping disabled.
        let grads: Vec<f64> = vec![30.0 / 2.0f64.sqrt(), -30.0 / 2.0f64.sqrt()];
        assert!((global_norm(&grads) - 30.0).abs() < 1e-12);

        let mut clipped = OptimState::new(2, 0.05, 15.0);
        let mut a = vec![1.0, -1.0];
        clipped.adam_step(&mut a, &grads).unwrap();

        let mut reference = OptimState::new(2, 0.05, -1.0);
        let mut b = vec![1.0, -1.0];
        let halved: Vec<f64> = grads.iter().map(|g| g * 0.5).collect();
        reference.adam_step(&mut b, &halved).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn small_gradients_pass_unclipped() {
        let mut state = OptimState::new(1, 0.1, 15.0);
        let mut with_clip = vec![0.0];
        state.adam_step(&mut with_clip, &[1.0]).unwrap();

        let mut free = OptimState::new(1, 0.1, -1.0);
        let mut without = vec![0.0];
        free.adam_step(&mut without, &[1.0]).unwrap();
        assert_eq!(with_clip, without);
    }

    #[test]
    fn non_finite_gradients_rejected() {
        let mut state = OptimState::new(1, 0.1, -1.0);
        let mut params = vec![0.0];
        assert!(matches!(
            state.adam_step(&mut params, &[f64::NAN]),
            Err(Error::NonFiniteGradient)
        ));
        assert!(state.adam_step(&mut params, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn state_round_trips_through_json() {
        let mut state = OptimState::new(2, 0.01, 15.0);
        let mut params = vec![0.5, -0.5];
        state.adam_step(&mut params, &[0.1, -0.2]).unwrap();
        let text = serde_json::to_string(&state).unwrap();
        let back: OptimState = serde_json::from_str(&text).unwrap();
        assert_eq!(back.m, state.m);
        assert_eq!(back.v, state.v);
        assert_eq!(back.step, state.step);
    }
}
