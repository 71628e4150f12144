use alloc::vec;
use alloc::vec::Vec;

use crate::encoders::ModelParams;
use crate::error::{bail, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// First and second moments for every parameter slice, plus the step count.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &ModelParams, config: AdamWConfig) -> Self {
        Self::for_shapes(params.slices().iter().map(|s| s.len()), config)
    }

    pub fn for_shapes(lens: impl IntoIterator<Item = usize>, config: AdamWConfig) -> Self {
        let first: Vec<Vec<f64>> = lens.into_iter().map(|n| vec![0.0; n]).collect();
        let second = first.clone();
        Self { config, step: 0, first, second }
    }

    /// One decoupled-weight-decay Adam update over matching slices.
    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) -> Result<()> {
        if !(lr >= 0.0) {
            bail!(Contract, "learning rate must be nonnegative, got {lr}");
        }
        if params.len() != self.first.len() || grads.len() != params.len() {
            bail!(
                Contract,
                "optimizer tracks {} tensors, got {} params / {} grads",
                self.first.len(),
                params.len(),
                grads.len()
            );
        }
        for ((p, g), m) in params.iter().zip(&grads).zip(&self.first) {
            if p.len() != g.len() || p.len() != m.len() {
                bail!(Contract, "parameter, gradient and moment lengths differ");
            }
        }
        self.step += 1;
        let AdamWConfig { beta1, beta2, eps, weight_decay } = self.config;
        let t = self.step as i32;
        let bias1 = 1.0 - libm::pow(beta1, t as f64);
        let bias2 = 1.0 - libm::pow(beta2, t as f64);
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.first).zip(&mut self.second) {
            for i in 0..p.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                let theta = p[i];
                p[i] = theta - lr * (m_hat / (libm::sqrt(v_hat) + eps)) - lr * weight_decay * theta;
            }
        }
        Ok(())
    }
}

/// AdamW step over a whole model.
pub fn adamw_step(opt: &mut OptimizerState, params: &mut ModelParams, grads: &ModelParams, lr: f64) -> Result<()> {
    opt.update(params.slices_mut(), grads.slices(), lr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn scalar_step(theta: f64, g: f64, lr: f64, wd: f64) -> f64 {
        let mut opt = OptimizerState::for_shapes([1], AdamWConfig { weight_decay: wd, ..Default::default() });
        let mut p = [theta];
        opt.update(vec![&mut p[..]], vec![&[g][..]], lr).unwrap();
        p[0]
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        assert_eq!(scalar_step(0.37, 0.0, 0.1, 0.0), 0.37);
    }

    #[test]
    fn first_step_closed_form() {
        // m_hat = v_hat = 1: update = lr / (1 + eps)
        let theta = scalar_step(0.0, 1.0, 1e-3, 0.0);
        assert_abs_diff_eq!(theta, -1e-3 / (1.0 + 1e-8), epsilon = 1e-15);
        assert_abs_diff_eq!(theta, -9.99999994e-4, epsilon = 1e-11);
    }

    #[test]
    fn decoupled_decay_only() {
        assert_abs_diff_eq!(scalar_step(1.0, 0.0, 0.1, 0.01), 0.999, epsilon = 1e-15);
    }

    #[test]
    fn shape_mismatch_is_contract_error() {
        let mut opt = OptimizerState::for_shapes([2], AdamWConfig::default());
        let mut p = [0.0; 3];
        assert!(matches!(opt.update(vec![&mut p[..]], vec![&[0.0; 3][..]], 0.1), Err(crate::Error::Contract(_))));
        let mut p = [0.0; 2];
        assert!(matches!(opt.update(vec![&mut p[..]], vec![&[0.0; 2][..]], -1.0), Err(crate::Error::Contract(_))));
    }

    #[test]
    fn zero_lr_keeps_bits() {
        let mut opt = OptimizerState::for_shapes([3], AdamWConfig::default());
        let mut p = [0.1, -2.5, 1e-300];
        let before = p;
        opt.update(vec![&mut p[..]], vec![&[1.0, -3.0, 7.0][..]], 0.0).unwrap();
        assert_eq!(p, before);
    }
}
