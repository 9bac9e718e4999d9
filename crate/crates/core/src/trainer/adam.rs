//! Adam with per-tensor step counts and global-norm gradient clipping.

use crate::autodiff::Tensor;
use crate::Real;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Optimizer state over a fixed flat list of parameter tensors.
#[derive(Debug, Clone)]
pub struct AdamState<S> {
    pub config: AdamConfig,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
    pub t: Vec<u64>,
}

impl<S: Real> AdamState<S> {
    pub fn new(config: AdamConfig, shapes: &[Vec<usize>]) -> Self {
        Self {
            config,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: vec![0; shapes.len()],
        }
    }

    /// Clip gradients to a global L2 norm, then apply Adam to every slot
    /// with a gradient. Slots without gradients keep their moments.
    pub fn step(&mut self, params: &mut [&mut Tensor<S>], grads: &mut [Option<Tensor<S>>], clip_norm: f64) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        let mut sq = 0.0f64;
        for g in grads.iter().flatten() {
            for &x in &g.data {
                let x = x.to_f64();
                sq += x * x;
            }
        }
        let norm = sq.sqrt();
        let scale = if clip_norm > 0.0 && norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };
        let cfg = self.config;
        for i in 0..params.len() {
            let Some(g) = &grads[i] else { continue };
            self.t[i] += 1;
            let t = self.t[i] as f64;
            let b1 = S::lit(cfg.beta1);
            let b2 = S::lit(cfg.beta2);
            let one_m_b1 = S::lit(1.0 - cfg.beta1);
            let one_m_b2 = S::lit(1.0 - cfg.beta2);
            let correction1 = 1.0 - cfg.beta1.powf(t);
            let correction2 = 1.0 - cfg.beta2.powf(t);
            let lr = S::lit(cfg.learning_rate * correction2.sqrt() / correction1);
            let eps = S::lit(cfg.epsilon);
            let s = S::lit(scale);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &graw), mi), vi) in params[i]
                .data
                .iter_mut()
                .zip(&g.data)
                .zip(m.data.iter_mut())
                .zip(v.data.iter_mut())
            {
                let gc = graw * s;
                *mi = *mi * b1 + gc * one_m_b1;
                *vi = *vi * b2 + gc * gc * one_m_b2;
                *p -= lr * *mi / (nalgebra::ComplexField::sqrt(*vi) + eps);
            }
        }
    }
}
