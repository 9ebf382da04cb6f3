//! Parameter updates and the learning-rate schedule.
//!
//! Adaptive update with decoupled weight decay, per element, step `t >= 1`:
//!
//! ```text
//! m = b1 m + (1 - b1) g
//! v = b2 v + (1 - b2) g^2
//! p = p - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps) - lr wd p
//! ```
//!
//! Plain gradient descent: `p = p - lr g`.

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::harness::config::{OptimConfig, Schedule};

/// Learning rate for 1-based step `t` out of `total` steps with `warmup`
/// warmup steps: `lr t / warmup` while `t <= warmup`, then
/// `lr 0.5 (1 + cos(pi p))` with `p = (t - warmup) / (total - warmup)`.
pub fn learning_rate(schedule: Schedule, lr_max: f64, t: usize, warmup: usize, total: usize) -> f64 {
    match schedule {
        Schedule::Constant => lr_max,
        Schedule::Cosine => {
            if t <= warmup {
                lr_max * t as f64 / warmup as f64
            } else {
                let span = total.saturating_sub(warmup).max(1) as f64;
                let progress = ((t - warmup) as f64 / span).min(1.0);
                lr_max * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `bound`.
/// Returns the norm before clipping. `bound = 0` disables clipping.
pub fn clip_global_norm(grads: &mut [Tensor], bound: f64) -> f64 {
    let norm = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
    if bound > 0.0 && norm > bound {
        let s = bound / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
        debug_assert!(
            grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt() <= bound * (1.0 + 1e-9),
            "clipped gradient norm exceeds bound"
        );
    }
    norm
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerKind {
    AdamW,
    Sgd,
}

#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, cfg: &OptimConfig, params: &[Tensor]) -> Self {
        let zeros = |p: &[Tensor]| p.iter().map(|t| vec![0.0; t.data().len()]).collect();
        let adaptive = kind == OptimizerKind::AdamW;
        Optimizer {
            kind,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.adam_epsilon,
            weight_decay: cfg.weight_decay,
            step: 0,
            m: if adaptive { zeros(params) } else { Vec::new() },
            v: if adaptive { zeros(params) } else { Vec::new() },
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(grads).any(|(p, g)| p.shape() != g.shape()) {
            return Err(Error::input("optimizer: gradients do not match parameters"));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= lr * g);
                }
            }
            OptimizerKind::AdamW => {
                let (b1, b2) = (self.beta1, self.beta2);
                let c1 = 1.0 - b1.powi(self.step);
                let c2 = 1.0 - b2.powi(self.step);
                for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.m[k], &mut self.v[k]);
                    for (i, (p, &g)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g;
                        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                        let update = (m[i] / c1) / ((v[i] / c2).sqrt() + self.epsilon);
                        *p -= lr * update + lr * self.weight_decay * *p;
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn schedule_warms_up_then_anneals() {
        let lr = |t| learning_rate(Schedule::Cosine, 1.0, t, 10, 110);
        assert_eq!(lr(1), 0.1);
        assert_eq!(lr(10), 1.0);
        assert!((lr(60) - 0.5).abs() < 1e-12);
        assert!(lr(110).abs() < 1e-12);
        assert!(lr(11) < 1.0 && lr(11) > 0.99);
        assert_eq!(learning_rate(Schedule::Constant, 0.3, 7, 10, 110), 0.3);
    }

    #[test]
    fn sgd_and_adamw_first_steps() {
        let cfg = OptimConfig {
            weight_decay: 0.0,
            ..OptimConfig::default()
        };
        let mut p = vec![Tensor::vector(vec![1.0, -2.0])];
        let g = vec![Tensor::vector(vec![0.5, -4.0])];
        let mut sgd = Optimizer::new(OptimizerKind::Sgd, &cfg, &p);
        sgd.step(&mut p, &g, 0.1).unwrap();
        assert_eq!(p[0].data(), &[0.95, -1.6]);

        // First bias-corrected step moves each coordinate by about lr * sign(g).
        let mut q = vec![Tensor::vector(vec![1.0, -2.0])];
        let mut adam = Optimizer::new(OptimizerKind::AdamW, &cfg, &q);
        adam.step(&mut q, &g, 0.01).unwrap();
        assert!((q[0].data()[0] - 0.99).abs() < 1e-8);
        assert!((q[0].data()[1] + 1.99).abs() < 1e-8);

        let bad = vec![Tensor::vector(vec![1.0])];
        assert!(adam.step(&mut q, &bad, 0.01).is_err());
    }

    #[test]
    fn weight_decay_is_decoupled() {
        let cfg = OptimConfig {
            weight_decay: 0.5,
            ..OptimConfig::default()
        };
        let mut p = vec![Tensor::vector(vec![2.0])];
        let mut adam = Optimizer::new(OptimizerKind::AdamW, &cfg, &p);
        adam.step(&mut p, &[Tensor::vector(vec![0.0])], 0.1).unwrap();
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn clipped_norm_never_exceeds_bound(
            values in prop::collection::vec(-100.0f64..100.0, 2..40),
            bound in 0.01f64..10.0,
        ) {
            let mid = values.len() / 2;
            let mut grads = vec![Tensor::vector(values[..mid].to_vec()), Tensor::vector(values[mid..].to_vec())];
            let before = clip_global_norm(&mut grads, bound);
            let after = grads.iter().flat_map(|g| g.data()).map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!(after <= bound * (1.0 + 1e-9));
            if before <= bound {
                prop_assert!((after - before).abs() <= 1e-12 * before.max(1.0));
            }
        }
    }
}
