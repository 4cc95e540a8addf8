use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::gaussian_kernel_1d;
use crate::metrics::{C1, C2, SSIM_SIGMA, SSIM_WINDOW};

/// Training distribution of the noise level σ.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SigmaDistribution {
    #[default]
    Uniform,
    LogitNormal {
        mean: f64,
        std: f64,
    },
}

impl SigmaDistribution {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f32 {
        match *self {
            SigmaDistribution::Uniform => rng.random::<f32>(),
            SigmaDistribution::LogitNormal { mean, std } => {
                let z: f64 = StandardNormal.sample(rng);
                (1.0 / (1.0 + (-(mean + std * z)).exp())) as f32
            }
        }
    }
}

/// One point on the straight path between data `x0` (σ=0) and noise `ε`
/// (σ=1), with one σ per batch entry.
#[derive(Clone, Debug)]
pub struct FlowSample {
    pub x0: Tensor,
    pub epsilon: Tensor,
    pub sigma: Vec<f32>,
    pub x_sigma: Tensor,
    pub v_star: Tensor,
}

impl FlowSample {
    /// Builds the sample elementwise in `f32`:
    /// `x_σ = (1−σ)·x0 + σ·ε` and `v* = ε − x0`.
    pub fn from_parts(x0: &Tensor, epsilon: &Tensor, sigma: &[f32]) -> Result<Self> {
        if x0.shape() != epsilon.shape() {
            return Err(Error::shape(format!(
                "data {:?} vs noise {:?}",
                x0.shape(),
                epsilon.shape()
            )));
        }
        let b = x0.dim(0)?;
        if sigma.len() != b {
            return Err(Error::shape(format!("{} noise levels for a batch of {b}", sigma.len())));
        }
        let xs: Vec<f32> = x0.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let es: Vec<f32> = epsilon.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        if xs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite latent".into()));
        }
        let per = xs.len() / b;
        let mut x_sigma = Vec::with_capacity(xs.len());
        let mut v_star = Vec::with_capacity(xs.len());
        for (i, (&x, &e)) in xs.iter().zip(&es).enumerate() {
            let s = sigma[i / per];
            x_sigma.push((1.0 - s) * x + s * e);
            v_star.push(e - x);
        }
        let shape = x0.shape().clone();
        let dev = x0.device();
        Ok(Self {
            x0: Tensor::from_vec(xs, shape.clone(), dev)?,
            epsilon: Tensor::from_vec(es, shape.clone(), dev)?,
            sigma: sigma.to_vec(),
            x_sigma: Tensor::from_vec(x_sigma, shape.clone(), dev)?,
            v_star: Tensor::from_vec(v_star, shape, dev)?,
        })
    }

    pub fn sigma_tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(
            self.sigma.clone(),
            self.sigma.len(),
            self.x0.device(),
        )?)
    }

    /// One-step data estimate `x̂0 = x_σ − σ·v` for a predicted velocity.
    pub fn one_step_estimate(&self, v_pred: &Tensor) -> Result<Tensor> {
        let b = self.sigma.len();
        let s = self.sigma_tensor()?.to_dtype(v_pred.dtype())?.reshape((b, 1, 1, 1))?;
        Ok((self.x_sigma.to_dtype(v_pred.dtype())? - v_pred.broadcast_mul(&s)?)?)
    }
}

/// Standard-normal tensor from an explicit RNG.
pub fn randn_like<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f32> = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z as f32
        })
        .collect();
    Ok(Tensor::from_vec(data, shape, device)?)
}

/// Draws `ε` and one σ per batch entry.
pub fn make_flow_sample<R: Rng + ?Sized>(x0: &Tensor, rng: &mut R, dist: &SigmaDistribution) -> Result<FlowSample> {
    let eps = randn_like(rng, x0.dims(), x0.device())?;
    let sigma: Vec<f32> = (0..x0.dim(0)?).map(|_| dist.draw(rng)).collect();
    FlowSample::from_parts(x0, &eps, &sigma)
}

/// `(H−10)×H` banded matrix applying the 11-tap Gaussian over valid
/// positions.
fn band(n: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let k = gaussian_kernel_1d(SSIM_SIGMA, SSIM_WINDOW / 2);
    let m = n + 1 - SSIM_WINDOW;
    let mut data = vec![0.0f64; m * n];
    for o in 0..m {
        for (j, w) in k.iter().enumerate() {
            data[o * n + o + j] = *w;
        }
    }
    Ok(Tensor::from_vec(data, (m, n), device)?.to_dtype(dtype)?)
}

/// Differentiable mean SSIM between `B×C×H×W` batches (channel-mean
/// grayscale, same window and constants as [`crate::metrics::ssim`]).
pub fn ssim_tensor(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (_, _, h, w) = a.dims4()?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "{h}x{w} image is smaller than the {SSIM_WINDOW}px SSIM window"
        )));
    }
    let kh = band(h, a.dtype(), a.device())?;
    let kw = band(w, a.dtype(), a.device())?.t()?;
    let filt = |x: &Tensor| -> Result<Tensor> { Ok(kh.broadcast_matmul(&x.broadcast_matmul(&kw)?)?) };
    let ga = a.mean(1)?;
    let gb = b.mean(1)?;
    let mu_a = filt(&ga)?;
    let mu_b = filt(&gb)?;
    let va = (filt(&ga.sqr()?)? - mu_a.sqr()?)?;
    let vb = (filt(&gb.sqr()?)? - mu_b.sqr()?)?;
    let cov = (filt(&(&ga * &gb)?)? - (&mu_a * &mu_b)?)?;
    let num = (((&mu_a * &mu_b)? * 2.0)? + C1)?.mul(&((cov * 2.0)? + C2)?)?;
    let den = ((mu_a.sqr()? + mu_b.sqr()?)? + C1)?.mul(&((va + vb)? + C2)?)?;
    Ok((num / den)?.mean_all()?)
}

#[derive(Clone, Debug)]
pub struct DiffusionLoss {
    pub total: Tensor,
    pub mse: f64,
    pub ssim: f64,
}

/// `‖v_pred − v*‖² + λ·(1 − SSIM(preview, target))`, the squared norm
/// averaged per element.
pub fn diffusion_loss(
    v_pred: &Tensor,
    v_star: &Tensor,
    preview: &Tensor,
    target: &Tensor,
    lambda_ssim: f64,
) -> Result<DiffusionLoss> {
    if v_pred.shape() != v_star.shape() {
        return Err(Error::shape(format!(
            "velocity {:?} vs target velocity {:?}",
            v_pred.shape(),
            v_star.shape()
        )));
    }
    let mse = (v_pred - v_star.to_dtype(v_pred.dtype())?)?.sqr()?.mean_all()?;
    let s = ssim_tensor(preview, &target.to_dtype(preview.dtype())?)?;
    let mse_v = mse.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let ssim_v = s.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    for (term, v) in [("velocity_mse", mse_v), ("ssim", ssim_v)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: term.into(),
                breakdown: format!("velocity_mse={mse_v} ssim={ssim_v}"),
            });
        }
    }
    let ssim_term = s.to_dtype(mse.dtype())?.affine(-lambda_ssim, lambda_ssim)?;
    Ok(DiffusionLoss {
        total: (mse + ssim_term)?,
        mse: mse_v,
        ssim: ssim_v,
    })
}
