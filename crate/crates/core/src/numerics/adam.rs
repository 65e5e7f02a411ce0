use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias correction. Moments are sized to the parameter slice the
/// state was created for.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(len: usize, config: AdamConfig) -> Self {
        Self {
            config,
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape {
                context: "AdamState::step",
                expected: self.m.len(),
                found: if params.len() != self.m.len() {
                    params.len()
                } else {
                    grad.len()
                },
            });
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::non_finite(format!("gradient coordinate {i}")));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut state = AdamState::new(3, AdamConfig::default());
        let mut p = vec![1.0, -2.0, 0.5];
        state.step(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 0.5]);
        assert_eq!(state.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + eps).
        let mut state = AdamState::new(1, AdamConfig::with_lr(0.1));
        let mut p = vec![0.0];
        state.step(&mut p, &[1.0]).unwrap();
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn rejects_non_finite_gradient_and_bad_shapes() {
        let mut state = AdamState::new(2, AdamConfig::default());
        let mut p = vec![0.0, 0.0];
        assert!(matches!(
            state.step(&mut p, &[1.0, f64::NAN]),
            Err(Error::NonFinite { .. })
        ));
        assert!(matches!(state.step(&mut p, &[1.0]), Err(Error::Shape { .. })));
        assert_eq!(state.steps_taken(), 0);
    }
}
