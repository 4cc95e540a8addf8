use candle_core::{Module, Tensor};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use super::mask::MaskSpec;
use crate::error::{Error, Result};
use crate::nn::{gather_tokens, linear, Block, LayerNorm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        Self {
            embed_dim: 384,
            depth: 6,
            num_heads: 12,
            mlp_ratio: 4.0,
        }
    }
}

/// Transformer that maps context tokens of frame `t` to tokens for every
/// patch of frame `t+1`. Positions outside the context start from a learned
/// mask token.
#[derive(Clone, Debug)]
pub struct Predictor {
    num_patches: usize,
    embed: candle_nn::Linear,
    mask_token: Tensor,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
    out: candle_nn::Linear,
}

impl Predictor {
    pub fn new(cfg: &PredictorConfig, token_dim: usize, num_patches: usize, vb: VarBuilder) -> Result<Self> {
        if cfg.num_heads == 0 || !cfg.embed_dim.is_multiple_of(cfg.num_heads) {
            return Err(Error::config(format!(
                "predictor dim {} not divisible into {} heads",
                cfg.embed_dim, cfg.num_heads
            )));
        }
        let small = Init::Randn { mean: 0.0, stdev: 0.02 };
        Ok(Self {
            num_patches,
            embed: linear(token_dim, cfg.embed_dim, vb.pp("embed"))?,
            mask_token: vb.get_with_hints(cfg.embed_dim, "mask_token", small)?,
            pos_embed: vb.get_with_hints((1, num_patches, cfg.embed_dim), "pos_embed", small)?,
            blocks: (0..cfg.depth)
                .map(|i| {
                    Block::new(
                        cfg.embed_dim,
                        cfg.num_heads,
                        cfg.mlp_ratio,
                        vb.pp(format!("blocks.{i}")),
                    )
                })
                .collect::<Result<Vec<_>>>()?,
            norm: LayerNorm::new(cfg.embed_dim, vb.pp("norm"))?,
            out: linear(cfg.embed_dim, token_dim, vb.pp("out"))?,
        })
    }

    /// `context_tokens` is `B×K×D` with rows ordered like `mask.context`;
    /// returns `B×N×D`.
    pub fn forward(&self, context_tokens: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
        let (b, k, _) = context_tokens.dims3()?;
        let n = self.num_patches;
        if mask.num_patches() != n || mask.context.len() != k {
            return Err(Error::shape(format!(
                "predictor for {n} patches got {k} context tokens and a mask over {} patches with {} visible",
                mask.num_patches(),
                mask.context.len()
            )));
        }
        let ctx = self.embed.forward(context_tokens)?;
        let dp = ctx.dim(2)?;
        let seq = if k < n {
            let fill = self.mask_token.reshape((1, 1, dp))?.broadcast_as((b, n - k, dp))?;
            Tensor::cat(&[&ctx, &fill], 1)?
        } else {
            ctx
        };
        // position i reads row `order[i]` of [context rows ; mask rows]
        let mut order = Vec::with_capacity(n);
        let (mut next_ctx, mut next_fill) = (0usize, k);
        for i in 0..n {
            if next_ctx < k && mask.context[next_ctx] == i {
                order.push(next_ctx);
                next_ctx += 1;
            } else {
                order.push(next_fill);
                next_fill += 1;
            }
        }
        let mut x = gather_tokens(&seq, &order)?.broadcast_add(&self.pos_embed)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(self.out.forward(&self.norm.forward(&x)?)?)
    }
}

/// Runs the predictor from a full `B×N×D` token grid, keeping only the rows
/// the mask marks as context.
pub fn predict_future(predictor: &Predictor, tokens: &Tensor, mask: &MaskSpec) -> Result<Tensor> {
    let ctx = gather_tokens(tokens, &mask.context)?;
    predictor.forward(&ctx, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::jepa::mask::{sample_mask, MaskConfig};
    use crate::nn::SeededInit;
    use candle_core::{DType, Device, IndexOp};
    use candle_nn::VarMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(n: usize) -> Predictor {
        let cfg = PredictorConfig {
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
        };
        let map = VarMap::new();
        Predictor::new(&cfg, 24, n, SeededInit::builder(&map, 4, DType::F32, &Device::Cpu)).unwrap()
    }

    #[test]
    fn full_grid_in_full_grid_out() {
        let p = build(64);
        let z = Tensor::rand(0f32, 1., (2, 64, 24), &Device::Cpu).unwrap();
        let out = predict_future(&p, &z, &MaskSpec::full(64).unwrap()).unwrap();
        assert_eq!(out.dims(), &[2, 64, 24]);
        let v = out.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(v.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn tokens_outside_context_do_not_reach_the_predictor() {
        let p = build(64);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask = loop {
            let m = sample_mask(&mut rng, 64, &MaskConfig::default()).unwrap();
            if m.context.len() < 64 {
                break m;
            }
        };
        let hidden = (0..64).find(|i| !mask.is_context(*i)).unwrap();
        let z = Tensor::rand(0f32, 1., (1, 64, 24), &Device::Cpu).unwrap();
        let bump = Tensor::zeros((1, 64, 24), DType::F32, &Device::Cpu)
            .unwrap()
            .slice_assign(
                &[0..1, hidden..hidden + 1, 0..24],
                &Tensor::ones((1, 1, 24), DType::F32, &Device::Cpu).unwrap(),
            )
            .unwrap();
        let z2 = (&z + bump).unwrap();
        let ctx1 = gather_tokens(&z, &mask.context).unwrap();
        let ctx2 = gather_tokens(&z2, &mask.context).unwrap();
        assert_eq!(
            ctx1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            ctx2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let a = predict_future(&p, &z, &mask).unwrap();
        let b = predict_future(&p, &z2, &mask).unwrap();
        assert_eq!(
            a.i(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            b.i(0).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn rejects_mismatched_mask() {
        let p = build(64);
        let z = Tensor::rand(0f32, 1., (1, 16, 24), &Device::Cpu).unwrap();
        assert!(p.forward(&z, &MaskSpec::full(16).unwrap()).is_err());
    }
}
