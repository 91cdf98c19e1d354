//! Moment-based adaptive parameter updates with bias correction and
//! global-norm gradient clipping.

use crate::error::{Error, Result};

pub const LEARNING_RATE: f64 = 2e-4;
pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const CLIP_NORM: f64 = 1.0;

#[derive(Debug, Clone)]
pub struct TrainerState {
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Updates skipped because the gradient was not finite.
    pub skipped: u64,
}

impl TrainerState {
    pub fn new(n_params: usize, seed: u64) -> Self {
        TrainerState {
            step: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            lr: LEARNING_RATE,
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            clip_norm: CLIP_NORM,
            seed,
            skipped: 0,
        }
    }

    /// Applies one update in place. A non-finite gradient is skipped and
    /// reported without touching parameters or moments.
    pub fn train_step(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());

        let norm_sq: f64 = grad.iter().map(|g| g * g).sum();
        let norm = norm_sq.sqrt();
        if !norm.is_finite() {
            self.skipped += 1;
            return Err(Error::NonFiniteGradient(norm));
        }
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };

        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grad[i] * scale;
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}
