//! Adam with bias correction, plus the linear-warmup schedule.

use serde::{Deserialize, Serialize};

use crate::linalg::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
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

/// Moment buffers are kept positionally aligned with the parameter
/// enumeration the optimizer was built from; callers must pass tensors in
/// that same order on every step.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, shapes: &[(usize, usize)]) -> Self {
        Adam {
            cfg,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Mat::zeros(r, c)).collect(),
        }
    }

    pub fn for_mats(cfg: AdamConfig, mats: &[&Mat]) -> Self {
        let shapes: Vec<(usize, usize)> = mats.iter().map(|m| (m.rows, m.cols)).collect();
        Adam::new(cfg, &shapes)
    }

    pub fn step(&mut self, params: &mut [&mut Mat], grads: &[&Mat], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "optimizer/param mismatch");
        assert_eq!(grads.len(), self.m.len(), "optimizer/grad mismatch");
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.rows, m.rows);
            assert_eq!(p.cols, m.cols);
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = b1 * m.data[i] + (1.0 - b1) * gi;
                v.data[i] = b2 * v.data[i] + (1.0 - b2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                p.data[i] -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Linear warmup from 0 to `peak` over `warmup_steps`, then constant.
/// Step 0 yields exactly 0; step `warmup_steps` yields exactly `peak`.
pub fn warmup_lr(step: usize, warmup_steps: usize, peak: f64) -> f64 {
    if warmup_steps == 0 || step >= warmup_steps {
        peak
    } else {
        peak * step as f64 / warmup_steps as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_schedule_is_exact_pointwise() {
        assert_eq!(warmup_lr(0, 10, 3e-4), 0.0);
        assert_eq!(warmup_lr(5, 10, 3e-4), 1.5e-4);
        assert_eq!(warmup_lr(10, 10, 3e-4), 3e-4);
        assert_eq!(warmup_lr(500, 10, 3e-4), 3e-4);
        assert_eq!(warmup_lr(0, 0, 3e-4), 3e-4);
    }

    #[test]
    fn adam_descends_a_quadratic() {
        // f(x) = x^2 / 2, gradient x.
        let mut x = Mat::from_vec(1, 1, vec![5.0]);
        let mut adam = Adam::new(AdamConfig::default(), &[(1, 1)]);
        for _ in 0..2000 {
            let g = Mat::from_vec(1, 1, vec![x.data[0]]);
            adam.step(&mut [&mut x], &[&g], 0.01);
        }
        assert!(x.data[0].abs() < 1e-2, "x = {}", x.data[0]);
    }
}
