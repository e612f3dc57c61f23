//! Euler integration of a velocity field from noise at `t = 1` to data at `t = 0`.

use alloc::vec::Vec;

use crate::conditioning::PromptEmbedding;
use crate::dit::{Conditioner, Denoiser};
use crate::error::{invalid, Error, Result};
use crate::fusion::FusedCondition;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

pub trait VelocityField {
    fn velocity(&self, x_t: &Tensor, t: f64) -> Result<Tensor>;
}

impl<F: Fn(&Tensor, f64) -> Result<Tensor>> VelocityField for F {
    fn velocity(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        self(x_t, t)
    }
}

/// Denoiser conditioned on an already fused reference feature.
pub struct FusedField<'a> {
    pub model: &'a Denoiser,
    pub fused: &'a FusedCondition,
    pub embedding: Option<&'a PromptEmbedding>,
}

impl VelocityField for FusedField<'_> {
    fn velocity(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        self.model.denoise(x_t, t, self.fused, self.embedding)
    }
}

/// Denoiser conditioned on reference images through a chosen conditioner.
pub struct ReferenceField<'a> {
    pub model: &'a Denoiser,
    pub references: &'a [Tensor],
    pub embedding: Option<&'a PromptEmbedding>,
    pub conditioner: Conditioner,
}

impl VelocityField for ReferenceField<'_> {
    fn velocity(&self, x_t: &Tensor, t: f64) -> Result<Tensor> {
        self.model.predict(x_t, t, self.references, self.embedding, &self.conditioner)
    }
}

/// Starting noise for sample `index` under `seed`.
pub fn initial_noise(seed: u64, index: u64, shape: &[usize]) -> Tensor {
    SeededRng::derive(seed, "sample", index).normal_tensor(shape)
}

/// `x_{t - dt} = x_t - dt * v(x_t, t)` over `steps` uniform steps.
pub fn integrate(field: &dyn VelocityField, x1: Tensor, steps: usize) -> Result<Tensor> {
    if steps == 0 {
        return Err(invalid("sample", "steps must be >= 1".into()));
    }
    let dt = 1.0 / steps as f64;
    let mut x = x1;
    for k in 0..steps {
        let t = 1.0 - k as f64 * dt;
        let v = field.velocity(&x, t)?;
        x.ensure_same_shape(&v, "sample")?;
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi -= dt * vi;
        }
        if let Some(i) = x.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "sample", index: i });
        }
    }
    Ok(x)
}

/// Samples a latent with the model conditioned on `fused`.
pub fn sample(
    model: &Denoiser,
    fused: &FusedCondition,
    embedding: Option<&PromptEmbedding>,
    steps: usize,
    seed: u64,
) -> Result<Tensor> {
    let noise = initial_noise(seed, 0, &model.config().latent_shape());
    integrate(&FusedField { model, fused, embedding }, noise, steps)
}

/// Samples from reference images; `index` selects an independent noise draw.
pub fn sample_references(
    field: &ReferenceField<'_>,
    steps: usize,
    seed: u64,
    index: u64,
) -> Result<Tensor> {
    let noise = initial_noise(seed, index, &field.model.config().latent_shape());
    integrate(field, noise, steps)
}

/// Time grid visited by [`integrate`].
pub fn time_grid(steps: usize) -> Vec<f64> {
    (0..steps).map(|k| 1.0 - k as f64 / steps as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_field_returns_noise() {
        let x1 = initial_noise(1, 0, &[2, 3]);
        let out = integrate(&|x: &Tensor, _| Ok(Tensor::zeros(x.shape().to_vec())), x1.clone(), 7).unwrap();
        assert!(out.bitwise_eq(&x1));
    }

    #[test]
    fn single_step_is_one_euler_update() {
        let x1 = initial_noise(2, 0, &[4]);
        let field = |x: &Tensor, t: f64| Ok(x.map(|v| v * t + 0.5));
        let out = integrate(&field, x1.clone(), 1).unwrap();
        let want = x1.map(|v| v - (v + 0.5));
        assert!(out.bitwise_eq(&want));
    }

    #[test]
    fn constant_field_integrates_exactly() {
        let x1 = initial_noise(3, 0, &[3, 2]);
        let c = 0.7;
        for steps in [1, 3, 10, 64] {
            let out = integrate(&|x: &Tensor, _| Ok(Tensor::full(x.shape().to_vec(), c)), x1.clone(), steps).unwrap();
            assert!(out.max_abs_diff(&x1.map(|v| v - c)) < 1e-12, "steps {steps}");
        }
    }

    #[test]
    fn rejects_zero_steps_and_blowups() {
        let x1 = initial_noise(4, 0, &[2]);
        assert!(integrate(&|x: &Tensor, _| Ok(x.clone()), x1.clone(), 0).is_err());
        let blow = |x: &Tensor, _| Ok(Tensor::full(x.shape().to_vec(), f64::INFINITY));
        assert!(matches!(integrate(&blow, x1, 2), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn time_grid_starts_at_one() {
        assert_eq!(time_grid(4), alloc::vec![1.0, 0.75, 0.5, 0.25]);
    }
}
