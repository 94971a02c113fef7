//! First-order optimizers over flat parameter vectors.

use serde::{Deserialize, Serialize};

/// Which optimizer a trainer uses. Adam is the training default; plain SGD
/// exists for the update-norm variance studies, where the applied update
/// must stay proportional to the gradient estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone)]
pub enum Optimizer {
    Adam(Adam),
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, n_params: usize) -> Self {
        match kind {
            OptimizerKind::Adam => Optimizer::Adam(Adam::new(lr, n_params)),
            OptimizerKind::Sgd => Optimizer::Sgd { lr },
        }
    }

    /// Apply one update in place; returns the L2 norm of the applied step.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> f64 {
        match self {
            Optimizer::Adam(adam) => adam.step(params, grad),
            Optimizer::Sgd { lr } => {
                let mut norm_sq = 0.0;
                for (p, g) in params.iter_mut().zip(grad) {
                    let delta = *lr * g;
                    *p -= delta;
                    norm_sq += delta * delta;
                }
                norm_sq.sqrt()
            }
        }
    }
}

/// Adam with the standard defaults (beta1 = 0.9, beta2 = 0.999, eps = 1e-8).
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(lr: f64, n_params: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    /// One bias-corrected update; returns the L2 norm of the applied step.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) -> f64 {
        assert_eq!(params.len(), grad.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let mut norm_sq = 0.0;
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            let delta = self.lr * m_hat / (v_hat.sqrt() + self.eps);
            params[i] -= delta;
            norm_sq += delta * delta;
        }
        norm_sq.sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut params = vec![0.5, -0.25, 1.0];
        let before = params.clone();
        let mut adam = Adam::new(1e-3, 3);
        let norm = adam.step(&mut params, &[0.0, 0.0, 0.0]);
        assert_eq!(params, before);
        assert_eq!(norm, 0.0);
    }

    #[test]
    fn adam_descends_a_quadratic()
    {
        // f(x) = x^2 / 2, gradient x.
        let mut params = vec![1.0];
        let mut adam = Adam::new(0.05, 1);
        for _ in 0..400 {
            let g = params[0];
            adam.step(&mut params, &[g]);
        }
        assert!(params[0].abs() < 1e-2, "final {}", params[0]);
    }

    #[test]
    fn sgd_update_is_proportional_to_gradient() {
        let mut params = vec![1.0, 2.0];
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, 0.1, 2);
        let norm = sgd.step(&mut params, &[1.0, -2.0]);
        assert!((params[0] - 0.9).abs() < 1e-15);
        assert!((params[1] - 2.2).abs() < 1e-15);
        assert!((norm - 0.1 * 5.0f64.sqrt()).abs() < 1e-15);
    }
}
