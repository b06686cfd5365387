use serde::{Deserialize, Serialize};

use super::{NetworkParams, NeuralError};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
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

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(dim: usize, cfg: AdamConfig) -> Self {
        Self {
            first_moment: vec![0.0; dim],
            second_moment: vec![0.0; dim],
            step_count: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
        }
    }

    /// In-place bias-corrected Adam update with step size `step`.
    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64], step: f64) -> Result<(), NeuralError> {
        for len in [grad.len(), self.first_moment.len(), self.second_moment.len()] {
            if len != theta.len() {
                return Err(NeuralError::DimensionMismatch {
                    expected: theta.len(),
                    found: len,
                });
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..theta.len() {
            let g = grad[i];
            let m = self.beta1 * self.first_moment[i] + (1.0 - self.beta1) * g;
            let v = self.beta2 * self.second_moment[i] + (1.0 - self.beta2) * g * g;
            self.first_moment[i] = m;
            self.second_moment[i] = v;
            theta[i] -= step * (m / c1) / ((v / c2).sqrt() + self.epsilon);
        }
        Ok(())
    }
}

/// Functional form of [`AdamState::apply`].
pub fn adam_step(
    params: &NetworkParams,
    grad: &[f64],
    state: &AdamState,
    step: f64,
) -> Result<(NetworkParams, AdamState), NeuralError> {
    let mut p = params.clone();
    let mut s = state.clone();
    s.apply(&mut p.theta, grad, step)?;
    Ok((p, s))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_keeps_params() {
        let p = NetworkParams::new(vec![1.0, -2.0]);
        let s = AdamState::new(2, AdamConfig::default());
        let (p2, s2) = adam_step(&p, &[0.0, 0.0], &s, 1e-3).unwrap();
        assert_eq!(p2, p);
        assert_eq!(s2.step_count, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let p = NetworkParams::new(vec![0.0]);
        let s = AdamState::new(1, AdamConfig::default());
        let (p2, _) = adam_step(&p, &[1.0], &s, 1e-3).unwrap();
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p2.theta[0] - expected).abs() < 1e-12);
        assert!((p2.theta[0] - -9.99999990e-4).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_strictly_decreases() {
        let mut p = NetworkParams::new(vec![0.0]);
        let mut s = AdamState::new(1, AdamConfig::default());
        let mut last = p.theta[0];
        for _ in 0..5 {
            let (np, ns) = adam_step(&p, &[0.7], &s, 1e-2).unwrap();
            assert!(np.theta[0] < last);
            last = np.theta[0];
            p = np;
            s = ns;
        }
        assert!(s.second_moment.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn mismatch() {
        let s = AdamState::new(2, AdamConfig::default());
        assert!(adam_step(&NetworkParams::zeros(3), &[0.0; 3], &s, 1e-3).is_err());
    }
}
