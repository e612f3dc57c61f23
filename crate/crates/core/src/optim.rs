//! AdamW with decoupled weight decay and a cosine schedule with restarts.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, shape_err, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(deny_unknown_fields, default))]
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

/// First and second moment estimates, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: ParamStore,
    pub v: ParamStore,
}

impl Moments {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Self { m: params.zeros_like(), v: params.zeros_like() }
    }
}

/// One AdamW update. `t` is the 1-based step count used for bias correction.
///
/// `theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`
pub fn adamw_step(
    config: &AdamWConfig,
    params: &mut ParamStore,
    grads: &[Tensor],
    moments: &mut Moments,
    t: u64,
    lr: f64,
) -> Result<()> {
    if t == 0 {
        return Err(invalid("adamw_step", "step count is 1-based".into()));
    }
    if grads.len() != params.len() || moments.m.len() != params.len() || moments.v.len() != params.len() {
        return Err(shape_err(
            "adamw_step",
            format!("{} gradients and {} moments for {} parameters", grads.len(), moments.m.len(), params.len()),
        ));
    }
    let bc1 = 1.0 - libm::pow(config.beta1, t as f64);
    let bc2 = 1.0 - libm::pow(config.beta2, t as f64);
    let (m_all, v_all) = (moments.m.tensors_mut(), moments.v.tensors_mut());
    for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
        if p.shape() != g.shape() || m_all[i].shape() != p.shape() || v_all[i].shape() != p.shape() {
            return Err(shape_err("adamw_step", format!("parameter {i}: {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        let iter = p.data_mut().iter_mut().zip(g.data()).zip(m_all[i].data_mut().iter_mut().zip(v_all[i].data_mut()));
        for ((theta, &gi), (m, v)) in iter {
            *m = config.beta1 * *m + (1.0 - config.beta1) * gi;
            *v = config.beta2 * *v + (1.0 - config.beta2) * gi * gi;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *theta -= lr * (m_hat / (libm::sqrt(v_hat) + config.eps) + config.weight_decay * *theta);
        }
    }
    Ok(())
}

/// `lr(s) = base * (1 + cos(pi * (s mod S) / S)) / 2`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineRestarts {
    pub base_lr: f64,
    pub period: u64,
}

impl CosineRestarts {
    pub fn new(base_lr: f64, period: u64) -> Result<Self> {
        if period == 0 {
            return Err(invalid("CosineRestarts", "restart period must be >= 1".into()));
        }
        if !(base_lr > 0.0 && base_lr.is_finite()) {
            return Err(invalid("CosineRestarts", format!("base learning rate {base_lr}")));
        }
        Ok(Self { base_lr, period })
    }

    pub fn lr(&self, step: u64) -> f64 {
        let phase = (step % self.period) as f64 / self.period as f64;
        self.base_lr * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * phase))
    }

    pub fn curve(&self, steps: u64) -> Vec<f64> {
        (0..steps).map(|s| self.lr(s)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("theta", Tensor::vector(alloc::vec![v]));
        s
    }

    #[test]
    fn single_step_matches_closed_form() {
        // f = theta^2 / 2 at theta = 1: g = 1, m = 0.1, v = 0.001, both
        // bias-corrected back to 1, so the step is lr * (1 / (1 + eps) + wd).
        let cfg = AdamWConfig::default();
        let mut p = scalar_store(1.0);
        let mut mom = Moments::zeros_like(&p);
        adamw_step(&cfg, &mut p, &[Tensor::vector(alloc::vec![1.0])], &mut mom, 1, 0.1).unwrap();
        let want = 1.0 - 0.1 * (1.0 / (1.0 + 1e-8) + 0.01);
        assert!((p.tensors()[0].data()[0] - want).abs() < 1e-12);
        assert!((mom.m.tensors()[0].data()[0] - 0.1).abs() < 1e-15);
        assert!((mom.v.tensors()[0].data()[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn second_step_uses_bias_correction() {
        let cfg = AdamWConfig::default();
        let mut p = scalar_store(1.0);
        let mut mom = Moments::zeros_like(&p);
        let mut theta = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        for t in 1..=2u64 {
            let g = theta;
            adamw_step(&cfg, &mut p, &[Tensor::vector(alloc::vec![g])], &mut mom, t, 0.05).unwrap();
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t as i32));
            let vh = v / (1.0 - 0.999f64.powi(t as i32));
            theta -= 0.05 * (mh / (vh.sqrt() + 1e-8) + 0.01 * theta);
        }
        assert!((p.tensors()[0].data()[0] - theta).abs() < 1e-12);
    }

    #[test]
    fn schedule_values() {
        let s = CosineRestarts::new(1e-3, 200).unwrap();
        assert!((s.lr(0) - 1e-3).abs() < 1e-15);
        assert!((s.lr(50) - 1e-3 * 0.5 * (1.0 + core::f64::consts::FRAC_1_SQRT_2)).abs() < 1e-15);
        assert!((s.lr(100) - 5e-4).abs() < 1e-15);
        assert!((s.lr(200) - 1e-3).abs() < 1e-15);
        assert!(CosineRestarts::new(1e-3, 0).is_err());
    }

    #[test]
    fn rejects_mismatched_gradients() {
        let mut p = scalar_store(1.0);
        let mut mom = Moments::zeros_like(&p);
        assert!(adamw_step(&AdamWConfig::default(), &mut p, &[], &mut mom, 1, 0.1).is_err());
        assert!(adamw_step(&AdamWConfig::default(), &mut p, &[Tensor::zeros([2])], &mut mom, 1, 0.1).is_err());
    }
}
