//! AdamW with decoupled weight decay on matrix weights only.

use crate::error::{Error, Result};
use crate::linalg::Float;
use crate::model::{ModelConfig, Params};

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.95, eps: 1e-8, weight_decay: 0.05, clip_norm: Some(1.0) }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW<T> {
    pub cfg: AdamWConfig,
    m: Params<T>,
    v: Params<T>,
    decay: Vec<bool>,
    step: u64,
}

impl<T: Float> AdamW<T> {
    pub fn new(cfg: AdamWConfig, model: &ModelConfig) -> Self {
        let decay = Params::<T>::spec(model).into_iter().map(|s| s.decay).collect();
        Self { cfg, m: Params::zeros(model), v: Params::zeros(model), decay, step: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update in place and returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut Params<T>, grads: &Params<T>) -> Result<f64> {
        let norm = grads.norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite { stage: "gradient".into(), layer: None });
        }
        let clip = match self.cfg.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.step += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let f = T::from_f64_lossy;
        let (b1, b2, lr, eps) = (f(c.beta1), f(c.beta2), c.lr, f(c.eps));
        let (one_b1, one_b2) = (f(1.0 - c.beta1), f(1.0 - c.beta2));
        let step_size = f(lr / bc1);
        let inv_bc2 = f(1.0 / bc2);
        let clip = f(clip);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.m.tensors_mut().into_iter().zip(self.v.tensors_mut()))
            .zip(&self.decay);
        for (((p, g), (m, v)), &decay) in tensors {
            let shrink = if decay { f(1.0 - lr * c.weight_decay) } else { T::one() };
            for i in 0..p.len() {
                let gi = g[i] * clip;
                m[i] = b1 * m[i] + one_b1 * gi;
                v[i] = b2 * v[i] + one_b2 * gi * gi;
                let denom = (v[i] * inv_bc2).sqrt() + eps;
                p[i] = p[i] * shrink - step_size * m[i] / denom;
            }
        }
        Ok(norm)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StepIndexing;

    fn cfg() -> ModelConfig {
        ModelConfig {
            vocab_size: 3,
            num_classes: 1,
            dim: 4,
            num_layers: 1,
            num_heads: 1,
            mlp_ratio: 1.0,
            max_grid: (2, 2),
            max_steps: 2,
            dropout: 0.0,
            step_indexing: StepIndexing::Ordinal,
        }
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mc = cfg();
        let mut p = Params::<f64>::zeros(&mc);
        let mut g = Params::<f64>::zeros(&mc);
        g.head_b[0] = 0.5;
        g.head_b[1] = -0.25;
        let mut opt = AdamW::new(AdamWConfig { clip_norm: None, ..Default::default() }, &mc);
        opt.step(&mut p, &g).unwrap();
        // bias-corrected first step is lr * sign(g)
        assert!((p.head_b[0] + 1e-4).abs() < 1e-9);
        assert!((p.head_b[1] - 1e-4).abs() < 1e-9);
        assert_eq!(p.head_b[2], 0.0);
    }

    #[test]
    fn decay_only_touches_matrices() {
        let mc = cfg();
        let mut p = Params::<f64>::zeros(&mc);
        p.head_w.fill(1.0);
        p.head_b.fill(1.0);
        let g = Params::<f64>::zeros(&mc);
        let mut opt = AdamW::new(AdamWConfig { lr: 0.1, ..Default::default() }, &mc);
        opt.step(&mut p, &g).unwrap();
        assert!((p.head_w[0] - (1.0 - 0.1 * 0.05)).abs() < 1e-12);
        assert_eq!(p.head_b[0], 1.0);
    }
}
