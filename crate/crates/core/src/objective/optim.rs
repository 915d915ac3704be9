use std::f64::consts::PI;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::config::OptimConfig;

/// Learning rate at 1-based `step` of `total`: linear warmup then cosine decay to `min_lr`.
pub fn cosine_lr(cfg: &OptimConfig, step: usize, total: usize) -> f64 {
    if cfg.warmup_steps > 0 && step <= cfg.warmup_steps {
        return cfg.lr * step as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let t = (step.saturating_sub(cfg.warmup_steps)) as f64 / span as f64;
    cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + (PI * t.min(1.0)).cos())
}

/// Adam with decoupled weight decay. Decay applies to matrices only
/// (biases, norms and embeddings of rank 1 are exempt).
pub struct AdamW<T> {
    cfg: OptimConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimConfig, params: &[Tensor<T>]) -> Self {
        Self {
            cfg,
            m: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            v: params.iter().map(|p| vec![T::zero(); p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Option<&Tensor<T>>], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = T::of(1.0 - b1.powi(self.t));
        let c2 = T::of(1.0 - b2.powi(self.t));
        let (b1, b2) = (T::of(b1), T::of(b2));
        let (one, eps, lr_t) = (T::one(), T::of(self.cfg.eps), T::of(lr));
        let decay = T::of(1.0 - lr * self.cfg.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let matrix = p.rank() >= 2;
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &gv), (mv, vv)) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut().zip(v.iter_mut())) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                if matrix {
                    *w *= decay;
                }
                *w -= lr_t * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = OptimConfig { lr: 1.0, min_lr: 0.0, ..Default::default() };
        assert!((cosine_lr(&c, 0, 100) - 1.0).abs() < 1e-12);
        assert!((cosine_lr(&c, 50, 100) - 0.5).abs() < 1e-12);
        assert!(cosine_lr(&c, 100, 100).abs() < 1e-12);
        let w = OptimConfig { warmup_steps: 10, ..c };
        assert!((cosine_lr(&w, 5, 100) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut p = vec![Tensor::new([2], vec![1.0f64, -1.0]).unwrap()];
        let g = Tensor::new([2], vec![0.5, -2.0]).unwrap();
        let mut opt = AdamW::new(OptimConfig::default(), &p);
        opt.step(&mut p, &[Some(&g)], 0.1);
        // first Adam step has magnitude ≈ lr
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] + 0.9).abs() < 1e-6);
    }
}
