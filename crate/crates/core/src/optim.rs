//! Adam with decoupled weight decay.

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 6e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, params: &[Tensor]) -> Self {
        Self {
            config,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update in place. `grads[i]` must match `params[i]` in length.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor]) {
        assert_eq!(params.len(), grads.len());
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (i, (x, &gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *x);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_leaves_params() {
        let mut p = vec![Tensor::from_vec(vec![1.0, -2.0])];
        let g = vec![Tensor::from_vec(vec![0.5, 0.5])];
        let mut opt = AdamW::new(AdamWConfig { lr: 0.0, ..Default::default() }, &p);
        opt.step(&mut p, &g);
        assert_eq!(p[0].data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.0, ..Default::default() };
        let mut p = vec![Tensor::from_vec(vec![1.0, 1.0])];
        let g = vec![Tensor::from_vec(vec![3.0, -0.01])];
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &g);
        // Bias-corrected first step is lr · g / (|g| + eps).
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert!((p[0].data()[1] - 1.1).abs() < 1e-5);
    }

    #[test]
    fn decay_is_decoupled_from_gradient() {
        let cfg = AdamWConfig { lr: 0.1, weight_decay: 0.5, ..Default::default() };
        let mut p = vec![Tensor::from_vec(vec![2.0])];
        let g = vec![Tensor::from_vec(vec![0.0])];
        let mut opt = AdamW::new(cfg, &p);
        opt.step(&mut p, &g);
        assert!((p[0].data()[0] - (2.0 - 0.1 * 0.5 * 2.0)).abs() < 1e-12);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.0, ..Default::default() };
        let mut p = vec![Tensor::from_vec(vec![3.0, -4.0])];
        let mut opt = AdamW::new(cfg, &p);
        for _ in 0..2000 {
            let g = vec![p[0].map(|x| 2.0 * (x - 1.0))];
            opt.step(&mut p, &g);
        }
        for &x in p[0].data() {
            assert!((x - 1.0).abs() < 1e-3);
        }
    }
}
