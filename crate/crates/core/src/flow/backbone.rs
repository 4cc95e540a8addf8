use std::collections::BTreeMap;

use candle_core::{DType, Module, Tensor, D};
use candle_nn::VarBuilder;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::lora::{LoraConfig, LoraLinear};
use crate::adapter::ConditioningBundle;
use crate::error::{Error, Result};
use crate::jepa::patchify;
use crate::nn::{linear, linear_zeros, sinusoidal_embedding, Attention, LayerNorm, Mlp};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub latent_channels: usize,
    /// Latent side length (image side / 8).
    pub latent_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub cross_dim: usize,
    pub pooled_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            latent_size: 16,
            patch_size: 1,
            hidden_dim: 384,
            depth: 6,
            num_heads: 6,
            mlp_ratio: 4.0,
            cross_dim: 4096,
            pooled_dim: 2048,
        }
    }
}

impl BackboneConfig {
    pub fn grid(&self) -> usize {
        self.latent_size / self.patch_size
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.latent_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "latent size {} not divisible by patch {}",
                self.latent_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "hidden dim {} not divisible into {} heads",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

fn lora_attention(
    dim: usize,
    ctx: usize,
    heads: usize,
    base: VarBuilder,
    lora: Option<(&LoraConfig, VarBuilder)>,
) -> Result<Attention<LoraLinear>> {
    let part =
        |name: &str, i: usize| LoraLinear::new(i, dim, base.pp(name), lora.as_ref().map(|(c, vb)| (*c, vb.pp(name))));
    Ok(Attention::from_parts(
        part("q", dim)?,
        part("k", ctx)?,
        part("v", ctx)?,
        part("o", dim)?,
        heads,
    ))
}

fn modulate(x: &Tensor, shift: &Tensor, scale: &Tensor) -> Result<Tensor> {
    Ok(x.broadcast_mul(&(scale.unsqueeze(1)? + 1.0)?)?
        .broadcast_add(&shift.unsqueeze(1)?)?)
}

#[derive(Clone, Debug)]
struct DitBlock {
    norm1: LayerNorm,
    self_attn: Attention<LoraLinear>,
    norm2: LayerNorm,
    cross_attn: Attention<LoraLinear>,
    norm3: LayerNorm,
    mlp: Mlp,
    ada: candle_nn::Linear,
}

impl DitBlock {
    fn new(cfg: &BackboneConfig, base: VarBuilder, lora: Option<(&LoraConfig, VarBuilder)>) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(Self {
            norm1: LayerNorm::new(d, base.pp("norm1"))?,
            self_attn: lora_attention(
                d,
                d,
                cfg.num_heads,
                base.pp("self_attn"),
                lora.as_ref().map(|(c, vb)| (*c, vb.pp("self_attn"))),
            )?,
            norm2: LayerNorm::new(d, base.pp("norm2"))?,
            cross_attn: lora_attention(
                d,
                cfg.cross_dim,
                cfg.num_heads,
                base.pp("cross_attn"),
                lora.as_ref().map(|(c, vb)| (*c, vb.pp("cross_attn"))),
            )?,
            norm3: LayerNorm::new(d, base.pp("norm3"))?,
            mlp: Mlp::new(d, (d as f64 * cfg.mlp_ratio) as usize, base.pp("mlp"))?,
            ada: linear(d, 6 * d, base.pp("ada"))?,
        })
    }

    fn forward(&self, x: &Tensor, c: &Tensor, h: &Tensor) -> Result<Tensor> {
        let m = self.ada.forward(&c.silu()?)?.chunk(6, D::Minus1)?;
        let a = modulate(&self.norm1.forward(x)?, &m[0], &m[1])?;
        let x = (x + self.self_attn.forward(&a, &a)?.broadcast_mul(&m[2].unsqueeze(1)?)?)?;
        let x = (&x + self.cross_attn.forward(&self.norm2.forward(&x)?, h)?)?;
        let a = modulate(&self.norm3.forward(&x)?, &m[3], &m[4])?;
        Ok((&x + self.mlp.forward(&a)?.broadcast_mul(&m[5].unsqueeze(1)?)?)?)
    }
}

/// Diffusion transformer predicting the rectified-flow velocity. The noise
/// level and pooled vector `p` modulate every block; tokens `h` enter by
/// cross-attention. All attention projections carry optional LoRA deltas.
#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    embed: candle_nn::Linear,
    pos: Tensor,
    t1: candle_nn::Linear,
    t2: candle_nn::Linear,
    pooled: candle_nn::Linear,
    blocks: Vec<DitBlock>,
    final_norm: LayerNorm,
    final_ada: candle_nn::Linear,
    out: candle_nn::Linear,
}

impl Backbone {
    /// `base` supplies the (usually frozen) transformer weights and `lora`
    /// the trainable low-rank deltas.
    pub fn new(cfg: &BackboneConfig, base: VarBuilder, lora: Option<(&LoraConfig, VarBuilder)>) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden_dim;
        let patch_dim = cfg.latent_channels * cfg.patch_size * cfg.patch_size;
        let tokens = cfg.grid() * cfg.grid();
        Ok(Self {
            cfg: cfg.clone(),
            embed: linear(patch_dim, d, base.pp("embed"))?,
            pos: base.get_with_hints((1, tokens, d), "pos", candle_nn::Init::Randn { mean: 0.0, stdev: 0.02 })?,
            t1: linear(d, d, base.pp("t1"))?,
            t2: linear(d, d, base.pp("t2"))?,
            pooled: linear(cfg.pooled_dim, d, base.pp("pooled"))?,
            blocks: (0..cfg.depth)
                .map(|i| {
                    DitBlock::new(
                        cfg,
                        base.pp(format!("blocks.{i}")),
                        lora.as_ref().map(|(c, vb)| (*c, vb.pp(format!("blocks.{i}")))),
                    )
                })
                .collect::<Result<Vec<_>>>()?,
            final_norm: LayerNorm::new(d, base.pp("final_norm"))?,
            final_ada: linear(d, 2 * d, base.pp("final_ada"))?,
            out: linear_zeros(d, patch_dim, base.pp("out"))?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// Every attention projection of the network, for inspection.
    pub fn lora_layers(&self) -> Vec<(String, &LoraLinear)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (kind, attn) in [("self_attn", &b.self_attn), ("cross_attn", &b.cross_attn)] {
                for (p, l) in [("q", &attn.q), ("k", &attn.k), ("v", &attn.v), ("o", &attn.o)] {
                    out.push((format!("blocks.{i}.{kind}.{p}"), l));
                }
            }
        }
        out
    }

    /// Velocity for `x` (`B×C×h×w`) at per-sample noise levels `sigma` (`B`).
    pub fn forward(&self, x: &Tensor, sigma: &Tensor, cond: &ConditioningBundle) -> Result<Tensor> {
        let (b, c, hh, ww) = x.dims4()?;
        let s = self.cfg.latent_size;
        if c != self.cfg.latent_channels || hh != s || ww != s {
            return Err(Error::shape(format!(
                "backbone expects {}x{s}x{s} latents, got {c}x{hh}x{ww}",
                self.cfg.latent_channels
            )));
        }
        if cond.h.dim(D::Minus1)? != self.cfg.cross_dim || cond.p.dim(D::Minus1)? != self.cfg.pooled_dim {
            return Err(Error::shape(format!(
                "conditioning widths ({}, {}) do not match backbone ({}, {})",
                cond.h.dim(D::Minus1)?,
                cond.p.dim(D::Minus1)?,
                self.cfg.cross_dim,
                self.cfg.pooled_dim
            )));
        }
        let dtype = x.dtype();
        let p = self.cfg.patch_size;
        let tokens = self.embed.forward(&patchify(x, p)?)?.broadcast_add(&self.pos)?;
        let temb = sinusoidal_embedding(&sigma.to_dtype(dtype)?, self.cfg.hidden_dim, 1000.0)?;
        let temb = self.t2.forward(&self.t1.forward(&temb)?.silu()?)?;
        let cvec = (temb + self.pooled.forward(&cond.p.to_dtype(dtype)?)?)?;
        let h = cond.h.to_dtype(dtype)?;
        let mut z = tokens;
        for block in &self.blocks {
            z = block.forward(&z, &cvec, &h)?;
        }
        let m = self.final_ada.forward(&cvec.silu()?)?.chunk(2, D::Minus1)?;
        let z = self
            .out
            .forward(&modulate(&self.final_norm.forward(&z)?, &m[0], &m[1])?)?;
        // inverse of patchify: B×N×(p·p·C) → B×C×h×w
        let g = self.cfg.grid();
        Ok(z.reshape((b, g, g, p, p, c))?
            .permute((0, 5, 1, 3, 2, 4))?
            .contiguous()?
            .reshape((b, c, s, s))?)
    }
}

/// SHA-256 over tensors in name order (name, shape, little-endian `f32`).
pub fn weights_digest(tensors: &BTreeMap<String, Tensor>) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, t) in tensors {
        hasher.update(name.as_bytes());
        for d in t.dims() {
            hasher.update((*d as u64).to_le_bytes());
        }
        for v in t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()? {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{frozen_tensors, SeededInit};
    use candle_core::Device;
    use candle_nn::VarMap;

    fn small() -> BackboneConfig {
        BackboneConfig {
            latent_channels: 4,
            latent_size: 4,
            patch_size: 1,
            hidden_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
            cross_dim: 8,
            pooled_dim: 6,
        }
    }

    fn cond(b: usize) -> ConditioningBundle {
        let dev = Device::Cpu;
        ConditioningBundle {
            h: Tensor::randn(0f32, 1., (b, 5, 8), &dev).unwrap(),
            p: Tensor::randn(0f32, 1., (b, 6), &dev).unwrap(),
            alpha: 0.5,
            dropped: vec![false; b],
        }
    }

    #[test]
    fn unpatchify_inverts_patchify() {
        let cfg = BackboneConfig {
            patch_size: 2,
            ..small()
        };
        let x = Tensor::arange(0f32, 2. * 4. * 16., &Device::Cpu)
            .unwrap()
            .reshape((2, 4, 4, 4))
            .unwrap();
        let t = patchify(&x, 2).unwrap();
        let g = cfg.grid();
        let back = t
            .reshape((2, g, g, 2, 2, 4))
            .unwrap()
            .permute((0, 5, 1, 3, 2, 4))
            .unwrap()
            .contiguous()
            .unwrap()
            .reshape((2, 4, 4, 4))
            .unwrap();
        assert_eq!(
            back.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            x.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn output_matches_latent_shape_and_rejects_bad_widths() {
        let map = VarMap::new();
        let net = Backbone::new(&small(), SeededInit::builder(&map, 0, DType::F32, &Device::Cpu), None).unwrap();
        let x = Tensor::randn(0f32, 1., (2, 4, 4, 4), &Device::Cpu).unwrap();
        let s = Tensor::new(&[0.3f32, 0.9], &Device::Cpu).unwrap();
        assert_eq!(net.forward(&x, &s, &cond(2)).unwrap().dims(), &[2, 4, 4, 4]);
        let mut bad = cond(2);
        bad.h = Tensor::zeros((2, 5, 7), DType::F32, &Device::Cpu).unwrap();
        assert!(net.forward(&x, &s, &bad).is_err());
    }

    #[test]
    fn gradients_reach_lora_but_not_frozen_base() {
        let dev = Device::Cpu;
        let base_map = VarMap::new();
        Backbone::new(&small(), SeededInit::builder(&base_map, 0, DType::F32, &dev), None).unwrap();
        // move the zero-initialised output layer so the LoRA path matters
        for (n, v) in base_map.data().lock().unwrap().iter() {
            if n.starts_with("out.") {
                v.set(&Tensor::randn(0f32, 0.1, v.shape(), &dev).unwrap()).unwrap();
            }
        }
        let frozen = frozen_tensors(&base_map);
        let lora_map = VarMap::new();
        let lcfg = LoraConfig::default();
        let net = Backbone::new(
            &small(),
            VarBuilder::from_tensors(frozen.clone(), DType::F32, &dev),
            Some((&lcfg, SeededInit::builder(&lora_map, 1, DType::F32, &dev))),
        )
        .unwrap();
        let x = Tensor::randn(0f32, 1., (2, 4, 4, 4), &dev).unwrap();
        let s = Tensor::new(&[0.3f32, 0.9], &dev).unwrap();
        let grads = net
            .forward(&x, &s, &cond(2))
            .unwrap()
            .sqr()
            .unwrap()
            .sum_all()
            .unwrap()
            .backward()
            .unwrap();
        for (name, var) in base_map.data().lock().unwrap().iter() {
            assert!(grads.get(var.as_tensor()).is_none(), "{name} got a gradient");
            assert!(grads.get(&frozen[name]).is_none(), "{name} got a gradient");
        }
        let any_lora = lora_map
            .data()
            .lock()
            .unwrap()
            .values()
            .any(|v| grads.get(v.as_tensor()).is_some());
        assert!(any_lora);
        assert_eq!(net.lora_layers().len(), 16);
    }

    #[test]
    fn digest_tracks_values() {
        let dev = Device::Cpu;
        let mut m = BTreeMap::new();
        m.insert("a".to_string(), Tensor::new(&[1f32, 2.0], &dev).unwrap());
        let d1 = weights_digest(&m).unwrap();
        assert_eq!(d1.len(), 64);
        assert_eq!(d1, weights_digest(&m).unwrap());
        m.insert("a".to_string(), Tensor::new(&[1f32, 2.0000002], &dev).unwrap());
        assert_ne!(d1, weights_digest(&m).unwrap());
    }
}
