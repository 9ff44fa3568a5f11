//! Adam with bias correction.

use serde::{Deserialize, Serialize};

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

/// First and second moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            t: 0,
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    /// Number of entries this optimizer updates.
    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], cfg: &AdamConfig) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed under the optimizer");
        assert_eq!(grad.len(), self.m.len(), "gradient length does not match parameters");
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - cfg.beta1.powi(t);
        let c2 = 1.0 - cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grad)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // after one step m_hat = g and v_hat = g², so the update is lr·sign(g)
        let mut state = AdamState::new(2);
        let mut p = vec![1.0, -1.0];
        state.step(&mut p, &[0.5, -2.0], &AdamConfig::with_lr(0.1));
        assert!((p[0] - 0.9).abs() < 1e-7);
        assert!((p[1] + 0.9).abs() < 1e-7);
        assert_eq!(state.t, 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut state = AdamState::new(1);
        let mut p = vec![3.0];
        let cfg = AdamConfig::with_lr(0.05);
        for _ in 0..2000 {
            let g = 2.0 * (p[0] - 1.0);
            state.step(&mut p, &[g], &cfg);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let mut state = AdamState::new(3);
        let mut p = vec![0.1, 0.2, 0.3];
        state.step(&mut p, &[1.0, -1.0, 0.5], &AdamConfig::with_lr(0.0));
        assert_eq!(p, vec![0.1, 0.2, 0.3]);
    }
}
