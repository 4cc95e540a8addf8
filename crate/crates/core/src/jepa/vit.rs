use candle_core::{Module, Tensor};
use candle_nn::{Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::data::EMBEDDING_CHANNELS;
use crate::error::{Error, Result};
use crate::nn::{gather_tokens, linear, Block, LayerNorm};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
}

impl Default for VitConfig {
    /// Base-scale encoder on 128 px frames.
    fn default() -> Self {
        Self {
            image_size: 128,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 768,
            depth: 12,
            num_heads: 12,
            mlp_ratio: 4.0,
        }
    }
}

impl VitConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.in_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::config(format!(
                "embed dim {} not divisible into {} heads",
                self.embed_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// `B×C×H×W` → `B×N×(p·p·C)`, patches in row-major grid order and each
/// patch flattened as `(row, col, channel)`.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "{h}x{w} image is not divisible into {patch}px patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    Ok(images
        .reshape((b, c, gh, patch, gw, patch))?
        .permute((0, 2, 4, 3, 5, 1))?
        .contiguous()?
        .reshape((b, gh * gw, patch * patch * c))?)
}

/// Vision transformer producing `N×D` patch tokens. Learned absolute
/// positional embeddings, pre-norm blocks, final layer norm.
#[derive(Clone, Debug)]
pub struct VitEncoder {
    cfg: VitConfig,
    patch_embed: candle_nn::Linear,
    pos_embed: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

impl VitEncoder {
    pub fn new(cfg: &VitConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let patch_embed = linear(cfg.patch_dim(), cfg.embed_dim, vb.pp("patch_embed"))?;
        let pos_embed = vb.get_with_hints(
            (1, cfg.num_patches(), cfg.embed_dim),
            "pos_embed",
            Init::Randn { mean: 0.0, stdev: 0.02 },
        )?;
        let blocks = (0..cfg.depth)
            .map(|i| {
                Block::new(
                    cfg.embed_dim,
                    cfg.num_heads,
                    cfg.mlp_ratio,
                    vb.pp(format!("blocks.{i}")),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            patch_embed,
            pos_embed,
            blocks,
            norm: LayerNorm::new(cfg.embed_dim, vb.pp("norm"))?,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.cfg
    }

    fn check_input(&self, images: &Tensor) -> Result<()> {
        let (_, c, h, w) = images.dims4()?;
        let s = self.cfg.image_size;
        if c != self.cfg.in_channels || h != s || w != s {
            return Err(Error::shape(format!(
                "encoder expects {}x{s}x{s} input, got {c}x{h}x{w}",
                self.cfg.in_channels
            )));
        }
        Ok(())
    }

    /// Linear patch embedding alone, before positions and attention.
    pub fn embed_patches(&self, images: &Tensor) -> Result<Tensor> {
        self.check_input(images)?;
        let patches = patchify(images, self.cfg.patch_size)?;
        Ok(self.patch_embed.forward(&patches)?)
    }

    fn run_blocks(&self, mut x: Tensor) -> Result<Tensor> {
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        Ok(self.norm.forward(&x)?)
    }

    /// Tokens for every patch: `B×N×D`.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let x = self.embed_patches(images)?.broadcast_add(&self.pos_embed)?;
        self.run_blocks(x)
    }

    /// Tokens for the visible `context` patches only: `B×K×D`.
    pub fn forward_context(&self, images: &Tensor, context: &[usize]) -> Result<Tensor> {
        let x = self.embed_patches(images)?.broadcast_add(&self.pos_embed)?;
        let x = gather_tokens(&x, context)?;
        self.run_blocks(x)
    }
}

/// Linear map from predictor tokens into the 64-channel foundation space.
#[derive(Clone, Debug)]
pub struct ProjectionHead {
    proj: candle_nn::Linear,
}

impl ProjectionHead {
    pub fn new(in_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            proj: linear(in_dim, EMBEDDING_CHANNELS, vb)?,
        })
    }

    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(self.proj.forward(tokens)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::Image;
    use crate::nn::SeededInit;
    use candle_core::{DType, Device};
    use candle_nn::VarMap;

    fn small() -> VitConfig {
        VitConfig {
            image_size: 32,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 16,
            depth: 2,
            num_heads: 2,
            mlp_ratio: 2.0,
        }
    }

    #[test]
    fn patchify_orders_rows_cols_channels() {
        let im = Image::from_fn(2, 4, 4, |c, y, x| (c * 100 + y * 10 + x) as f32);
        let t = Image::stack(&[&im], &Device::Cpu).unwrap();
        let p = patchify(&t, 2).unwrap();
        assert_eq!(p.dims(), &[1, 4, 8]);
        let row: Vec<f32> = p.get(0).unwrap().get(1).unwrap().to_vec1().unwrap();
        // patch (0, 1): pixels (0,2),(0,3),(1,2),(1,3) interleaved by channel
        assert_eq!(row, vec![2., 102., 3., 103., 12., 112., 13., 113.]);
    }

    #[test]
    fn patch_embedding_follows_translation() {
        let dev = Device::Cpu;
        let map = VarMap::new();
        let enc = VitEncoder::new(&small(), SeededInit::builder(&map, 1, DType::F32, &dev)).unwrap();
        let im = Image::from_fn(3, 32, 32, |c, y, x| ((c * 7 + y * 3 + x * 5) % 11) as f32 / 10.0);
        let shifted = im.roll(0, 8);
        let a = enc.embed_patches(&Image::stack(&[&im], &dev).unwrap()).unwrap();
        let b = enc.embed_patches(&Image::stack(&[&shifted], &dev).unwrap()).unwrap();
        let a: Vec<Vec<f32>> = a.squeeze(0).unwrap().to_vec2().unwrap();
        let b: Vec<Vec<f32>> = b.squeeze(0).unwrap().to_vec2().unwrap();
        for gy in 0..4 {
            for gx in 0..4 {
                assert_eq!(b[gy * 4 + (gx + 1) % 4], a[gy * 4 + gx]);
            }
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let dev = Device::Cpu;
        let map = VarMap::new();
        let enc = VitEncoder::new(&small(), SeededInit::builder(&map, 1, DType::F32, &dev)).unwrap();
        let x = Tensor::rand(0f32, 1., (2, 3, 32, 32), &dev).unwrap();
        let y1 = enc.forward(&x).unwrap();
        let y2 = enc.forward(&x).unwrap();
        assert_eq!(y1.dims(), &[2, 16, 16]);
        assert_eq!(
            y1.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            y2.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
        let c = enc.forward_context(&x, &[0, 3, 5]).unwrap();
        assert_eq!(c.dims(), &[2, 3, 16]);
        assert!(enc
            .forward(&Tensor::zeros((1, 3, 24, 24), DType::F32, &dev).unwrap())
            .is_err());
    }

    #[test]
    fn projection_is_affine() {
        let dev = Device::Cpu;
        let map = VarMap::new();
        let head = ProjectionHead::new(16, SeededInit::builder(&map, 2, DType::F64, &dev)).unwrap();
        let zero = Tensor::zeros((1, 3, 16), DType::F64, &dev).unwrap();
        let f0 = head.forward(&zero).unwrap();
        assert_eq!(f0.dims(), &[1, 3, 64]);
        let bias: Vec<f64> = map.data().lock().unwrap()["bias"].as_tensor().to_vec1().unwrap();
        for row in f0.squeeze(0).unwrap().to_vec2::<f64>().unwrap() {
            assert_eq!(row, bias);
        }
        let a = Tensor::randn(0f64, 1., (1, 3, 16), &dev).unwrap();
        let b = Tensor::randn(0f64, 1., (1, 3, 16), &dev).unwrap();
        let lhs = (head.forward(&(&a + &b).unwrap()).unwrap() - &f0).unwrap();
        let rhs = ((head.forward(&a).unwrap() - &f0).unwrap() + (head.forward(&b).unwrap() - &f0).unwrap()).unwrap();
        let err = (lhs - rhs)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(err < 1e-12);
    }
}
