use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::tensor::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer. Moment buffers are matched to parameters by
/// position, so the same parameter ordering must be passed to every step.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub config: AdamConfig,
    steps: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            steps: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients, then clears them.
    pub fn step(&mut self, params: Vec<&mut Param<T>>) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.value.len()]).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed between steps");
        self.steps += 1;
        let c = self.config;
        let t = self.steps as f64;
        let b1 = T::of(c.beta1);
        let b2 = T::of(c.beta2);
        let one = T::one();
        let step_size = T::of(c.learning_rate * (1.0 - c.beta2.powf(t)).sqrt() / (1.0 - c.beta1.powf(t)));
        let eps = T::of(c.eps * (1.0 - c.beta2.powf(t)).sqrt());
        for ((p, m), v) in params.into_iter().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + (one - b1) * g;
                v[i] = b2 * v[i] + (one - b2) * g * g;
                p.value[i] = p.value[i] - step_size * m[i] / (v[i].sqrt() + eps);
                p.grad[i] = T::zero();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        // With bias correction, the first Adam step is lr * sign(g).
        let mut p = Param::<f64> {
            name: "p".into(),
            shape: vec![2],
            value: vec![1.0, -1.0],
            grad: vec![0.5, -2.0],
        };
        let mut adam = Adam::new(AdamConfig::with_lr(0.1));
        adam.step(vec![&mut p]);
        assert!((p.value[0] - 0.9).abs() < 1e-6);
        assert!((p.value[1] + 0.9).abs() < 1e-6);
        assert_eq!(p.grad, vec![0.0, 0.0]);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = Param::<f64> {
            name: "p".into(),
            shape: vec![1],
            value: vec![3.0],
            grad: vec![0.0],
        };
        let mut adam = Adam::new(AdamConfig::with_lr(0.05));
        for _ in 0..2000 {
            p.grad[0] = 2.0 * (p.value[0] - 1.0);
            adam.step(vec![&mut p]);
        }
        assert!((p.value[0] - 1.0).abs() < 1e-3);
    }
}
