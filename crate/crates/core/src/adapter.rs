//! Conditioning adapter: predicted semantic tokens plus a coarse copy of the
//! current frame become cross-attention tokens `h` and a pooled vector `p`.

use candle_core::{DType, Module, Tensor};
use candle_nn::{Init, VarBuilder};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::jepa::patchify;
use crate::nn::{gather_tokens, linear, LayerNorm};

pub const COARSE_SIZE: usize = 32;
pub const COARSE_PATCH: usize = 4;
pub const COARSE_GRID: usize = COARSE_SIZE / COARSE_PATCH;
pub const COARSE_TOKENS: usize = COARSE_GRID * COARSE_GRID;
pub const COARSE_TOKEN_DIM: usize = 3 * COARSE_PATCH * COARSE_PATCH;

/// How coarse tokens are aligned with semantic tokens before gating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    /// Nearest-neighbour upsampling of the coarse grid to the semantic grid.
    #[default]
    Upsample,
    /// Semantic tokens followed by the 64 coarse tokens.
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    pub semantic_dim: usize,
    pub hidden_dim: usize,
    pub cross_dim: usize,
    pub pooled_dim: usize,
    pub max_semantic_tokens: usize,
    pub fusion: FusionMode,
    pub reference_dropout: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        Self {
            semantic_dim: 768,
            hidden_dim: 1024,
            cross_dim: 4096,
            pooled_dim: 2048,
            max_semantic_tokens: 1024,
            fusion: FusionMode::Upsample,
            reference_dropout: 0.15,
        }
    }
}

impl AdapterConfig {
    /// Closed-form number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let lin = |i: usize, o: usize| i * o + o;
        let ln = |d: usize| 2 * d;
        let tower = |i: usize| {
            lin(i, self.hidden_dim)
                + ln(self.hidden_dim)
                + lin(self.hidden_dim, self.hidden_dim)
                + ln(self.hidden_dim)
                + lin(self.hidden_dim, self.cross_dim)
        };
        self.max_semantic_tokens * self.semantic_dim
            + COARSE_TOKENS * COARSE_TOKEN_DIM
            + tower(self.semantic_dim)
            + tower(COARSE_TOKEN_DIM)
            + lin(self.semantic_dim, self.hidden_dim)
            + lin(self.hidden_dim, self.pooled_dim)
            + 1
    }
}

/// Area-downsampled 32×32 copy of a frame.
pub fn coarse_reference(frame: &Image) -> Result<Image> {
    frame.area_downsample(COARSE_SIZE, COARSE_SIZE)
}

/// `B×3×32×32` → `B×64×48`: row-major 4×4 patches, each flattened as
/// `(row, col, channel)`.
pub fn patchify_coarse(reference: &Tensor) -> Result<Tensor> {
    let (_, c, h, w) = reference.dims4()?;
    if c != 3 || h != COARSE_SIZE || w != COARSE_SIZE {
        return Err(Error::shape(format!(
            "coarse reference must be 3x{COARSE_SIZE}x{COARSE_SIZE}, got {c}x{h}x{w}"
        )));
    }
    patchify(reference, COARSE_PATCH)
}

#[derive(Clone, Debug)]
struct Tower {
    fc1: candle_nn::Linear,
    ln1: LayerNorm,
    fc2: candle_nn::Linear,
    ln2: LayerNorm,
    fc3: candle_nn::Linear,
}

impl Tower {
    fn new(input: usize, hidden: usize, out: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc1: linear(input, hidden, vb.pp("fc1"))?,
            ln1: LayerNorm::new(hidden, vb.pp("ln1"))?,
            fc2: linear(hidden, hidden, vb.pp("fc2"))?,
            ln2: LayerNorm::new(hidden, vb.pp("ln2"))?,
            fc3: linear(hidden, out, vb.pp("fc3"))?,
        })
    }
}

impl Module for Tower {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let x = self.ln1.forward(&self.fc1.forward(x)?)?.gelu()?;
        let x = self.ln2.forward(&self.fc2.forward(&x)?)?.gelu()?;
        self.fc3.forward(&x)
    }
}

/// Conditioning signals for the generator.
#[derive(Clone, Debug)]
pub struct ConditioningBundle {
    /// `B×M×cross_dim` cross-attention tokens.
    pub h: Tensor,
    /// `B×pooled_dim` global vector.
    pub p: Tensor,
    /// Learned gate value (before any dropout override).
    pub alpha: f64,
    /// Per-sample flag: coarse branch removed by reference dropout.
    pub dropped: Vec<bool>,
}

impl ConditioningBundle {
    /// All-zero conditioning, used to pretrain the unconditional base.
    pub fn zeros(
        batch: usize,
        tokens: usize,
        cross_dim: usize,
        pooled_dim: usize,
        dtype: DType,
        device: &candle_core::Device,
    ) -> Result<Self> {
        Ok(Self {
            h: Tensor::zeros((batch, tokens, cross_dim), dtype, device)?,
            p: Tensor::zeros((batch, pooled_dim), dtype, device)?,
            alpha: 1.0,
            dropped: vec![true; batch],
        })
    }
}

#[derive(Clone, Debug)]
pub struct Adapter {
    cfg: AdapterConfig,
    semantic_pos: Tensor,
    coarse_pos: Tensor,
    semantic: Tower,
    coarse: Tower,
    pool1: candle_nn::Linear,
    pool2: candle_nn::Linear,
    gate_logit: Tensor,
    fixed_gate: Option<f64>,
}

impl Adapter {
    pub fn new(cfg: &AdapterConfig, vb: VarBuilder) -> Result<Self> {
        if !(0.0..=1.0).contains(&cfg.reference_dropout) {
            return Err(Error::config(format!(
                "reference dropout {} outside [0, 1]",
                cfg.reference_dropout
            )));
        }
        let small = Init::Randn { mean: 0.0, stdev: 0.02 };
        Ok(Self {
            cfg: cfg.clone(),
            semantic_pos: vb.get_with_hints((1, cfg.max_semantic_tokens, cfg.semantic_dim), "semantic_pos", small)?,
            coarse_pos: vb.get_with_hints((1, COARSE_TOKENS, COARSE_TOKEN_DIM), "coarse_pos", small)?,
            semantic: Tower::new(cfg.semantic_dim, cfg.hidden_dim, cfg.cross_dim, vb.pp("semantic"))?,
            coarse: Tower::new(COARSE_TOKEN_DIM, cfg.hidden_dim, cfg.cross_dim, vb.pp("coarse"))?,
            pool1: linear(cfg.semantic_dim, cfg.hidden_dim, vb.pp("pool1"))?,
            pool2: linear(cfg.hidden_dim, cfg.pooled_dim, vb.pp("pool2"))?,
            gate_logit: vb.get_with_hints(1, "gate_logit", Init::Const(0.0))?,
            fixed_gate: None,
        })
    }

    pub fn config(&self) -> &AdapterConfig {
        &self.cfg
    }

    /// Replaces the learned gate by a constant (`None` restores it).
    pub fn with_fixed_gate(mut self, alpha: Option<f64>) -> Self {
        self.fixed_gate = alpha;
        self
    }

    /// Current gate value as a one-element tensor.
    pub fn gate(&self) -> Result<Tensor> {
        match self.fixed_gate {
            Some(a) => Ok(Tensor::full(a, 1, self.gate_logit.device())?.to_dtype(self.gate_logit.dtype())?),
            // 1 / (1 + e^-x), spelled out so it stays differentiable
            None => Ok((self.gate_logit.neg()?.exp()? + 1.0)?.recip()?),
        }
    }

    pub fn alpha(&self) -> Result<f64> {
        Ok(self.gate()?.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    /// Number of conditioning tokens for `n` semantic tokens.
    pub fn output_tokens(&self, n: usize) -> usize {
        match self.cfg.fusion {
            FusionMode::Upsample => n,
            FusionMode::Concat => n + COARSE_TOKENS,
        }
    }

    fn upsample_indices(n: usize) -> Result<Vec<usize>> {
        let g = (n as f64).sqrt().round() as usize;
        if g * g != n {
            return Err(Error::config(format!(
                "upsample fusion needs a square semantic grid, got {n} tokens"
            )));
        }
        Ok((0..n)
            .map(|i| {
                let (y, x) = (i / g, i % g);
                (y * COARSE_GRID / g) * COARSE_GRID + x * COARSE_GRID / g
            })
            .collect())
    }

    /// Builds `c = (h, p)`. `reference` is `B×3×32×32` in `[0, 1]`. When
    /// `dropout` carries an RNG each sample independently loses its coarse
    /// branch with the configured probability, which forces its gate to 1.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        semantic: &Tensor,
        reference: Option<&Tensor>,
        dropout: Option<&mut R>,
    ) -> Result<ConditioningBundle> {
        let (b, n, d) = semantic.dims3()?;
        if d != self.cfg.semantic_dim {
            return Err(Error::shape(format!(
                "adapter expects {}-d semantic tokens, got {d}",
                self.cfg.semantic_dim
            )));
        }
        if n > self.cfg.max_semantic_tokens {
            return Err(Error::config(format!(
                "{n} semantic tokens exceed the positional capacity of {}",
                self.cfg.max_semantic_tokens
            )));
        }
        let pos = self.semantic_pos.narrow(1, 0, n)?;
        let h_sem = self.semantic.forward(&semantic.broadcast_add(&pos)?)?;
        let pooled = semantic.mean(1)?;
        let p = self.pool2.forward(&self.pool1.forward(&pooled)?.gelu()?)?;
        let gate = self.gate()?;
        let alpha = self.alpha()?;

        let mut dropped = vec![false; b];
        if let Some(rng) = dropout {
            for flag in dropped.iter_mut() {
                *flag = rng.random::<f64>() < self.cfg.reference_dropout;
            }
        }
        let Some(reference) = reference else {
            let h = match self.cfg.fusion {
                FusionMode::Upsample => h_sem,
                FusionMode::Concat => {
                    let zeros = Tensor::zeros((b, COARSE_TOKENS, self.cfg.cross_dim), h_sem.dtype(), h_sem.device())?;
                    Tensor::cat(&[&h_sem, &zeros], 1)?
                }
            };
            return Ok(ConditioningBundle {
                h,
                p,
                alpha,
                dropped: vec![true; b],
            });
        };
        if reference.dim(0)? != b {
            return Err(Error::shape(format!(
                "{b} semantic grids but {} coarse references",
                reference.dim(0)?
            )));
        }
        let tokens = patchify_coarse(&reference.to_dtype(semantic.dtype())?)?.broadcast_add(&self.coarse_pos)?;
        let h_coarse = self.coarse.forward(&tokens)?;

        // per-sample gate: α where the reference is kept, 1 where dropped
        let keep: Vec<f64> = dropped.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect();
        let keep = Tensor::from_vec(keep, (b, 1, 1), semantic.device())?.to_dtype(semantic.dtype())?;
        let a = (keep.broadcast_mul(&gate.reshape((1, 1, 1))?)? + keep.affine(-1.0, 1.0)?)?;
        let one_minus_a = a.affine(-1.0, 1.0)?;
        let h = match self.cfg.fusion {
            FusionMode::Upsample => {
                let aligned = gather_tokens(&h_coarse, &Self::upsample_indices(n)?)?;
                (h_sem.broadcast_mul(&a)? + aligned.broadcast_mul(&one_minus_a)?)?
            }
            FusionMode::Concat => Tensor::cat(&[&h_sem.broadcast_mul(&a)?, &h_coarse.broadcast_mul(&one_minus_a)?], 1)?,
        };
        Ok(ConditioningBundle { h, p, alpha, dropped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{parameter_count, SeededInit};
    use candle_core::{Device, IndexOp};
    use candle_nn::VarMap;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_cfg() -> AdapterConfig {
        AdapterConfig {
            semantic_dim: 16,
            hidden_dim: 24,
            cross_dim: 32,
            pooled_dim: 12,
            max_semantic_tokens: 64,
            ..Default::default()
        }
    }

    fn build(cfg: &AdapterConfig) -> (VarMap, Adapter) {
        let map = VarMap::new();
        let a = Adapter::new(cfg, SeededInit::builder(&map, 5, DType::F32, &Device::Cpu)).unwrap();
        (map, a)
    }

    fn vec_of(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn constant_reference_gives_identical_tokens() {
        let im = Image::filled(3, 32, 32, 0.3);
        let t = patchify_coarse(&Image::stack(&[&im], &Device::Cpu).unwrap()).unwrap();
        assert_eq!(t.dims(), &[1, 64, 48]);
        let rows: Vec<Vec<f32>> = t.squeeze(0).unwrap().to_vec2().unwrap();
        assert!(rows.iter().all(|r| r == &vec![0.3f32; 48]));
    }

    #[test]
    fn single_pixel_touches_only_token_zero() {
        let mut im = Image::zeros(3, 32, 32);
        im.set(1, 0, 0, 1.0);
        let t = patchify_coarse(&Image::stack(&[&im], &Device::Cpu).unwrap()).unwrap();
        let rows: Vec<Vec<f32>> = t.squeeze(0).unwrap().to_vec2().unwrap();
        assert!(rows[0].iter().any(|v| *v != 0.0));
        assert!(rows[1..].iter().all(|r| r.iter().all(|v| *v == 0.0)));
        assert!(patchify_coarse(&Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap()).is_err());
    }

    #[test]
    fn output_widths_and_gate_init() {
        let (_, a) = build(&toy_cfg());
        let sem = Tensor::rand(0f32, 1., (2, 64, 16), &Device::Cpu).unwrap();
        let r = Tensor::rand(0f32, 1., (2, 3, 32, 32), &Device::Cpu).unwrap();
        let c = a.forward(&sem, Some(&r), None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(c.h.dims(), &[2, 64, 32]);
        assert_eq!(c.p.dims(), &[2, 12]);
        assert_eq!(c.alpha, 0.5);
        let small = Tensor::rand(0f32, 1., (2, 16, 16), &Device::Cpu).unwrap();
        let c = a.forward(&small, Some(&r), None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(c.h.dims(), &[2, 16, 32]);
        assert_eq!(c.p.dims(), &[2, 12]);
    }

    #[test]
    fn concat_mode_appends_coarse_tokens() {
        let cfg = AdapterConfig {
            fusion: FusionMode::Concat,
            ..toy_cfg()
        };
        let (_, a) = build(&cfg);
        let sem = Tensor::rand(0f32, 1., (1, 64, 16), &Device::Cpu).unwrap();
        let r = Tensor::rand(0f32, 1., (1, 3, 32, 32), &Device::Cpu).unwrap();
        let c = a.forward(&sem, Some(&r), None::<&mut ChaCha8Rng>).unwrap();
        assert_eq!(c.h.dims(), &[1, 128, 32]);
        assert_eq!(a.output_tokens(64), 128);
    }

    #[test]
    fn too_many_tokens_is_a_config_error() {
        let (_, a) = build(&toy_cfg());
        let sem = Tensor::zeros((1, 81, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            a.forward(&sem, None, None::<&mut ChaCha8Rng>),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn dropped_reference_matches_no_reference() {
        for fusion in [FusionMode::Upsample, FusionMode::Concat] {
            let cfg = AdapterConfig {
                reference_dropout: 1.0,
                fusion,
                ..toy_cfg()
            };
            let (_, a) = build(&cfg);
            let sem = Tensor::rand(0f32, 1., (2, 64, 16), &Device::Cpu).unwrap();
            let r = Tensor::rand(0f32, 1., (2, 3, 32, 32), &Device::Cpu).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let with = a.forward(&sem, Some(&r), Some(&mut rng)).unwrap();
            let without = a.forward(&sem, None, None::<&mut ChaCha8Rng>).unwrap();
            assert_eq!(with.dropped, vec![true, true]);
            assert_eq!(vec_of(&with.h), vec_of(&without.h));
            assert_eq!(vec_of(&with.p), vec_of(&without.p));
        }
    }

    #[test]
    fn clamped_gate_ignores_reference() {
        let (_, a) = build(&toy_cfg());
        let a = a.with_fixed_gate(Some(1.0));
        let sem = Tensor::rand(0f32, 1., (1, 64, 16), &Device::Cpu).unwrap();
        let r1 = Tensor::rand(0f32, 1., (1, 3, 32, 32), &Device::Cpu).unwrap();
        let r2 = Tensor::rand(0f32, 1., (1, 3, 32, 32), &Device::Cpu).unwrap();
        let h1 = a.forward(&sem, Some(&r1), None::<&mut ChaCha8Rng>).unwrap().h;
        let h2 = a.forward(&sem, Some(&r2), None::<&mut ChaCha8Rng>).unwrap().h;
        assert_eq!(vec_of(&h1), vec_of(&h2));
        // just below 1 the reference leaks in proportionally to 1 - α
        let mut prev = f32::INFINITY;
        for alpha in [0.5, 0.9, 0.99] {
            let a = a.clone().with_fixed_gate(Some(alpha));
            let h1 = a.forward(&sem, Some(&r1), None::<&mut ChaCha8Rng>).unwrap().h;
            let h2 = a.forward(&sem, Some(&r2), None::<&mut ChaCha8Rng>).unwrap().h;
            let diff = (h1 - h2)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap()
                .to_scalar::<f32>()
                .unwrap();
            assert!(diff > 0.0 && diff < prev);
            prev = diff;
        }
    }

    #[test]
    fn upsample_maps_coarse_cells_to_blocks() {
        let idx = Adapter::upsample_indices(256).unwrap();
        assert_eq!(idx[0], 0);
        assert_eq!(idx[1], 0);
        assert_eq!(idx[2], 1);
        assert_eq!(idx[16], 0);
        assert_eq!(idx[32], 8);
        assert_eq!(idx[255], 63);
        assert_eq!(Adapter::upsample_indices(64).unwrap(), (0..64).collect::<Vec<_>>());
        assert!(Adapter::upsample_indices(50).is_err());
    }

    #[test]
    fn gate_receives_gradient() {
        let map = VarMap::new();
        let a = Adapter::new(&toy_cfg(), SeededInit::builder(&map, 5, DType::F32, &Device::Cpu)).unwrap();
        let sem = Tensor::rand(0f32, 1., (1, 64, 16), &Device::Cpu).unwrap();
        let r = Tensor::rand(0f32, 1., (1, 3, 32, 32), &Device::Cpu).unwrap();
        let c = a.forward(&sem, Some(&r), None::<&mut ChaCha8Rng>).unwrap();
        let g = c.h.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let logit = map.data().lock().unwrap()["gate_logit"].as_tensor().clone();
        let grad = g.get(&logit).unwrap().i(0).unwrap().to_scalar::<f32>().unwrap();
        assert!(grad != 0.0);
    }

    #[test]
    fn closed_form_count_matches_built_adapter() {
        let cfg = toy_cfg();
        let (map, _) = build(&cfg);
        assert_eq!(parameter_count(&map), cfg.parameter_count());
    }
}
