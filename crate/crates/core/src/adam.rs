use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u32,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn steps(&self) -> u32 {
        self.step
    }

    /// Descends one bias-corrected Adam step and returns the new parameter.
    /// Entries whose gradient has always been zero stay exactly unchanged.
    pub fn step(&mut self, param: &Tensor, grad: &Tensor, lr: f64, cfg: &AdamConfig) -> Result<Tensor> {
        if param.len() != grad.len() || param.len() != self.m.len() {
            return Err(Error::shape(format!(
                "adam step: parameter {:?}, gradient {:?}, state {}",
                param.shape(),
                grad.shape(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        let p = param.precision();
        let mut out = Vec::with_capacity(param.len());
        for (i, (&w, &g)) in param.data().iter().zip(grad.data()).enumerate() {
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            out.push(p.round(w - lr * m_hat / (v_hat.sqrt() + cfg.eps)));
        }
        Tensor::new(param.shape().to_vec(), out, p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut s = AdamState::new(2);
        let p = Tensor::vector(vec![1.0, 1.0]);
        let g = Tensor::vector(vec![0.5, -3.0]);
        let out = s.step(&p, &g, 0.1, &AdamConfig::default()).unwrap();
        assert!((out.data()[0] - 0.9).abs() < 1e-6);
        assert!((out.data()[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn zero_gradient_leaves_entry_untouched() {
        let mut s = AdamState::new(2);
        let mut p = Tensor::vector(vec![0.0, 2.0]);
        for _ in 0..5 {
            p = s.step(&p, &Tensor::vector(vec![0.0, 1.0]), 0.01, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.data()[0], 0.0);
        assert!(p.data()[1] < 2.0);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut s = AdamState::new(1);
        let mut x = Tensor::vector(vec![3.0]);
        for _ in 0..2000 {
            let g = x.scale(2.0);
            x = s.step(&x, &g, 0.05, &AdamConfig::default()).unwrap();
        }
        assert!(x.data()[0].abs() < 1e-2);
    }
}
