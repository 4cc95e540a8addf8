use candle_core::{Module, Tensor};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::linear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self { rank: 8, alpha: 16.0 }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::config("LoRA rank must be at least 1"));
        }
        Ok(())
    }
}

/// `y = W x + b + (α/r)·B A x` with `W`, `b` from the base weights and the
/// low-rank pair `A` (`r×in`), `B` (`out×r`). `B` starts at zero, so a fresh
/// adapter leaves the base output unchanged.
#[derive(Clone, Debug)]
pub struct LoraLinear {
    base: candle_nn::Linear,
    lora: Option<(Tensor, Tensor)>,
    scale: f64,
}

impl LoraLinear {
    pub fn new(
        in_dim: usize,
        out_dim: usize,
        base: VarBuilder,
        lora: Option<(&LoraConfig, VarBuilder)>,
    ) -> Result<Self> {
        let base = linear(in_dim, out_dim, base)?;
        let (lora, scale) = match lora {
            Some((cfg, vb)) => {
                cfg.validate()?;
                let bound = 1.0 / (in_dim as f64).sqrt();
                let a = vb.get_with_hints((cfg.rank, in_dim), "lora_a", Init::Uniform { lo: -bound, up: bound })?;
                let b = vb.get_with_hints((out_dim, cfg.rank), "lora_b", Init::Const(0.0))?;
                (Some((a, b)), cfg.scale())
            }
            None => (None, 0.0),
        };
        Ok(Self { base, lora, scale })
    }

    /// Dense `out×in` update `(α/r)·B A`, if an adapter is attached.
    pub fn delta(&self) -> Result<Option<Tensor>> {
        match &self.lora {
            Some((a, b)) => Ok(Some((b.matmul(a)? * self.scale)?)),
            None => Ok(None),
        }
    }
}

impl Module for LoraLinear {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let y = self.base.forward(x)?;
        match &self.lora {
            Some((a, b)) => {
                let low = x.broadcast_matmul(&a.t()?)?.broadcast_matmul(&b.t()?)?;
                y + (low * self.scale)?
            }
            None => Ok(y),
        }
    }
}

/// Number of singular values of `m` above `tol`.
pub fn numerical_rank(m: &Tensor, tol: f64) -> Result<usize> {
    let (r, c) = m.dims2()?;
    let data: Vec<f64> = m.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
    let mat = nalgebra::DMatrix::from_row_slice(r, c, &data);
    Ok(mat.singular_values().iter().filter(|s| **s > tol).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::SeededInit;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    #[test]
    fn fresh_adapter_is_identity_and_rank_is_bounded() {
        let dev = Device::Cpu;
        let base = VarMap::new();
        let lora = VarMap::new();
        let cfg = LoraConfig { rank: 2, alpha: 4.0 };
        let plain = LoraLinear::new(6, 5, SeededInit::builder(&base, 1, DType::F64, &dev), None).unwrap();
        let adapted = LoraLinear::new(
            6,
            5,
            SeededInit::builder(&base, 1, DType::F64, &dev),
            Some((&cfg, SeededInit::builder(&lora, 2, DType::F64, &dev))),
        )
        .unwrap();
        let x = Tensor::randn(0f64, 1., (3, 6), &dev).unwrap();
        assert_eq!(
            plain.forward(&x).unwrap().to_vec2::<f64>().unwrap(),
            adapted.forward(&x).unwrap().to_vec2::<f64>().unwrap()
        );
        // give B a value and check the update has rank <= r
        let b = lora.data().lock().unwrap()["lora_b"].clone();
        b.set(&Tensor::randn(0f64, 1., (5, 2), &dev).unwrap()).unwrap();
        let adapted = LoraLinear::new(
            6,
            5,
            SeededInit::builder(&base, 1, DType::F64, &dev),
            Some((&cfg, SeededInit::builder(&lora, 2, DType::F64, &dev))),
        )
        .unwrap();
        let delta = adapted.delta().unwrap().unwrap();
        assert_eq!(numerical_rank(&delta, 1e-6).unwrap(), 2);
        let y = (adapted.forward(&x).unwrap() - plain.forward(&x).unwrap()).unwrap();
        let expect = x.matmul(&delta.t().unwrap()).unwrap();
        let err = (y - expect)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(err < 1e-12);
    }

    #[test]
    fn zero_rank_rejected() {
        assert!(LoraConfig { rank: 0, alpha: 1.0 }.validate().is_err());
        assert_eq!(LoraConfig::default().scale(), 2.0);
    }
}
