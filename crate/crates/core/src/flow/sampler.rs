use candle_core::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::codec::Codec;
use super::objective::randn_like;
use crate::error::{Error, Result};
use crate::image::Image;

/// A velocity field `v(x, σ)` for the ODE `dx/dσ = v`.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, sigma: f64) -> Result<Tensor>;
}

impl<F> VelocityField for F
where
    F: Fn(&Tensor, f64) -> Result<Tensor>,
{
    fn velocity(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        self(x, sigma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    /// Noise level the trajectory starts from.
    pub strength: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            strength: 0.35,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("sampler needs at least one step"));
        }
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::config(format!("strength {} outside [0, 1]", self.strength)));
        }
        Ok(())
    }
}

/// `steps + 1` linearly spaced noise levels from `start` down to exactly 0.
pub fn sigma_schedule(start: f64, steps: usize) -> Vec<f64> {
    (0..=steps)
        .map(|i| start * ((steps - i) as f64 / steps as f64))
        .collect()
}

/// Explicit Euler integration of `dx/dσ = v(x, σ)` from `start` to 0.
pub fn euler_integrate<V: VelocityField + ?Sized>(field: &V, x: &Tensor, start: f64, steps: usize) -> Result<Tensor> {
    let grid = sigma_schedule(start, steps);
    let mut x = x.clone();
    for w in grid.windows(2) {
        let v = field.velocity(&x, w[0])?;
        x = (&x + (v * (w[1] - w[0]))?)?;
    }
    Ok(x)
}

/// Latent trajectory: `x = (1−s)·init + s·ε`, then Euler steps to σ=0. With
/// zero strength the initial latent is returned untouched.
pub fn sample_latent<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    init_latent: &Tensor,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.strength == 0.0 {
        return Ok(init_latent.clone());
    }
    let eps = randn_like(rng, init_latent.dims(), init_latent.device())?.to_dtype(init_latent.dtype())?;
    let s = cfg.strength;
    let x = ((init_latent * (1.0 - s))? + (eps * s)?)?;
    euler_integrate(field, &x, s, cfg.steps)
}

/// Samples latents, decodes them and clamps to `[0, 1]`.
pub fn sample<V: VelocityField + ?Sized, R: Rng + ?Sized>(
    field: &V,
    codec: &Codec,
    init_latent: &Tensor,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<Image>> {
    let z = sample_latent(field, init_latent, cfg, rng)?;
    let images = Image::unstack(&codec.decode(&z)?)?;
    Ok(images.into_iter().map(Image::clamp01).collect())
}
