use super::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub learning_rate: f64,
    pub alpha: f64,
    pub eps: f64,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            alpha: 0.99,
            eps: 1e-5,
        }
    }
}

/// RMSprop without momentum or weight decay:
/// `acc <- alpha*acc + (1-alpha)*g^2`, `p <- p - lr*g/sqrt(acc + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    square_avg: Vec<Tensor>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            square_avg: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    pub fn accumulators(&self) -> &[Tensor] {
        &self.square_avg
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() || params.len() != self.square_avg.len() {
            return Err(Error::invalid(format!(
                "rmsprop: {} params, {} grads, {} accumulators",
                params.len(),
                grads.len(),
                self.square_avg.len()
            )));
        }
        for ((p, g), acc) in params.iter().zip(grads).zip(&self.square_avg) {
            if p.shape() != g.shape() || p.shape() != acc.shape() {
                return Err(Error::shape("rmsprop", &[p.shape(), g.shape(), acc.shape()]));
            }
        }
        let RmsPropConfig {
            learning_rate: lr,
            alpha,
            eps,
        } = self.config;
        for ((p, g), acc) in params.iter_mut().zip(grads).zip(&mut self.square_avg) {
            for ((p, &g), a) in p.data_mut().iter_mut().zip(g.data()).zip(acc.data_mut()) {
                *a = alpha * *a + (1.0 - alpha) * g * g;
                *p -= lr * g / (*a + eps).sqrt();
            }
        }
        Ok(())
    }
}

/// Rescales `grads` in place so their joint L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for v in g.data_mut() {
                *v *= scale;
            }
        }
    }
    norm
}
