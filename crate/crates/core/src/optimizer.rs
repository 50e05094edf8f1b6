use ndarray::{Array2, Zip};

use crate::autodiff::{Gradients, ParamStore};

#[derive(Debug, thiserror::Error)]
pub enum OptimizerError {
    #[error("non-finite gradient in parameter `{0}`")]
    NonFiniteGradient(String),
    #[error("gradient has {got} slots, parameters have {expected}")]
    SlotMismatch { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias-corrected first and second moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros = || params.values().iter().map(|p| Array2::zeros(p.dim())).collect();
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<(), OptimizerError> {
        if grads.slots().len() != params.len() {
            return Err(OptimizerError::SlotMismatch {
                expected: params.len(),
                got: grads.slots().len(),
            });
        }
        if let Some(i) = grads.slots().iter().position(|g| g.iter().any(|x| !x.is_finite())) {
            return Err(OptimizerError::NonFiniteGradient(params.names()[i].clone()));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .values_mut()
            .iter_mut()
            .zip(grads.slots())
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / c1;
                let v_hat = *v / c2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            });
        }
        Ok(())
    }
}
