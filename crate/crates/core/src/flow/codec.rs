use candle_core::{DType, Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Init, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{kaiming_conv_init, sorted_vars};
use crate::optim::{AdamW, AdamWConfig};

/// Spatial downsampling factor of the codec.
pub const CODEC_FACTOR: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecConfig {
    pub latent_channels: usize,
    /// Widths at 1/2, 1/4 and 1/8 resolution.
    pub channels: [usize; 3],
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            latent_channels: 4,
            channels: [32, 64, 128],
        }
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    // 3x3/s1 and 4x4/s2 both keep `side / stride` with one pixel of padding
    let cfg = Conv2dConfig {
        padding: 1,
        stride,
        ..Default::default()
    };
    let w = vb.get_with_hints((cout, cin, k, k), "weight", kaiming_conv_init())?;
    let b = vb.get_with_hints(cout, "bias", Init::Const(0.0))?;
    Ok(Conv2d::new(w, Some(b), cfg))
}

/// Convolutional autoencoder with 8× spatial compression. It always runs in
/// `f32`, whatever precision the rest of the model uses.
#[derive(Clone, Debug)]
pub struct Codec {
    cfg: CodecConfig,
    enc: Vec<Conv2d>,
    dec: Vec<Conv2d>,
    latent_scale: Tensor,
}

impl Codec {
    pub fn new(cfg: &CodecConfig, vb: VarBuilder) -> Result<Self> {
        let [c0, c1, c2] = cfg.channels;
        let e = vb.pp("enc");
        let enc = vec![
            conv(3, c0, 4, 2, e.pp("0"))?,
            conv(c0, c1, 4, 2, e.pp("1"))?,
            conv(c1, c2, 4, 2, e.pp("2"))?,
            conv(c2, c2, 3, 1, e.pp("3"))?,
            conv(c2, cfg.latent_channels, 3, 1, e.pp("4"))?,
        ];
        let d = vb.pp("dec");
        let dec = vec![
            conv(cfg.latent_channels, c2, 3, 1, d.pp("0"))?,
            conv(c2, c2, 3, 1, d.pp("1"))?,
            conv(c2, c1, 3, 1, d.pp("2"))?,
            conv(c1, c0, 3, 1, d.pp("3"))?,
            conv(c0, 3, 3, 1, d.pp("4"))?,
        ];
        let latent_scale = vb.get_with_hints(1, "latent_scale", Init::Const(1.0))?;
        Ok(Self {
            cfg: cfg.clone(),
            enc,
            dec,
            latent_scale,
        })
    }

    pub fn config(&self) -> &CodecConfig {
        &self.cfg
    }

    pub fn latent_scale(&self) -> Result<f64> {
        Ok(self.latent_scale.to_dtype(DType::F64)?.to_vec1::<f64>()?[0])
    }

    fn check(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 3 || h % CODEC_FACTOR != 0 || w % CODEC_FACTOR != 0 {
            return Err(Error::shape(format!(
                "codec needs RGB input with sides divisible by {CODEC_FACTOR}, got {c}x{h}x{w}"
            )));
        }
        Ok(())
    }

    /// Unscaled encoder output.
    fn encode_raw(&self, images: &Tensor) -> Result<Tensor> {
        self.check(images)?;
        let mut x = images.to_dtype(DType::F32)?.affine(2.0, -1.0)?;
        let last = self.enc.len() - 1;
        for (i, c) in self.enc.iter().enumerate() {
            x = c.forward(&x)?;
            if i < last {
                x = x.silu()?;
            }
        }
        Ok(x)
    }

    fn decode_raw(&self, latents: &Tensor) -> Result<Tensor> {
        let mut x = latents.to_dtype(DType::F32)?;
        let last = self.dec.len() - 1;
        for (i, c) in self.dec.iter().enumerate() {
            if i >= 2 {
                let (_, _, h, w) = x.dims4()?;
                x = x.upsample_nearest2d(2 * h, 2 * w)?;
            }
            x = c.forward(&x)?;
            if i < last {
                x = x.silu()?;
            }
        }
        Ok(x.affine(0.5, 0.5)?)
    }

    /// `B×3×H×W` in `[0, 1]` → `B×C×H/8×W/8`, multiplied by the latent scale.
    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.encode_raw(images)?.broadcast_mul(&self.latent_scale)?)
    }

    /// Inverse of [`Codec::encode`]; the output is not clamped.
    pub fn decode(&self, latents: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = latents.dims4()?;
        if c != self.cfg.latent_channels {
            return Err(Error::shape(format!(
                "codec expects {} latent channels, got {c}",
                self.cfg.latent_channels
            )));
        }
        self.decode_raw(&latents.broadcast_div(&self.latent_scale)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CodecTraining {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the L1 penalty on image-gradient differences.
    pub edge_weight: f64,
}

impl Default for CodecTraining {
    fn default() -> Self {
        Self {
            steps: 400,
            batch_size: 8,
            lr: 2e-3,
            seed: 0,
            edge_weight: 1.0,
        }
    }
}

/// Mean absolute horizontal and vertical finite differences of `d`.
fn edge_l1(d: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = d.dims4()?;
    let dx = (d.narrow(3, 1, w - 1)? - d.narrow(3, 0, w - 1)?)?.abs()?.mean_all()?;
    let dy = (d.narrow(2, 1, h - 1)? - d.narrow(2, 0, h - 1)?)?.abs()?.mean_all()?;
    Ok((dx + dy)?)
}

/// Fits the codec in `map` to `images` by pixel MSE plus the weighted edge
/// penalty, then sets the latent
/// scale so encoded latents have unit standard deviation. Returns the final
/// reconstruction MSE over all images.
pub fn pretrain_codec(map: &VarMap, codec: &Codec, images: &[Image], opts: &CodecTraining) -> Result<f64> {
    if images.is_empty() {
        return Err(Error::Data("no images to fit the codec on".into()));
    }
    let device = codec.latent_scale.device().clone();
    let vars: Vec<_> = sorted_vars(map)
        .into_iter()
        .filter(|(n, _)| n != "latent_scale")
        .collect();
    let mut opt = AdamW::new(vars, AdamWConfig::default())?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = Vec::new();
    for step in 0..opts.steps {
        if order.len() < opts.batch_size {
            let mut fresh: Vec<usize> = (0..images.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let batch: Vec<&Image> = order
            .drain(..opts.batch_size.min(order.len()))
            .map(|i| &images[i])
            .collect();
        let x = Image::stack(&batch, &device)?;
        let recon = codec.decode_raw(&codec.encode_raw(&x)?)?;
        let diff = (recon - &x)?;
        let mut loss = diff.sqr()?.mean_all()?;
        if opts.edge_weight > 0.0 {
            loss = (loss + (edge_l1(&diff)? * opts.edge_weight)?)?;
        }
        // cosine decay to a tenth of the base rate
        let f = step as f64 / opts.steps.max(1) as f64;
        let lr = opts.lr * (0.1 + 0.9 * 0.5 * (1.0 + (std::f64::consts::PI * f).cos()));
        opt.step(&loss.backward()?, lr, 0.0)?;
    }
    let mut sum_sq = 0.0;
    let mut count = 0usize;
    let mut latent_sq = 0.0;
    let mut latent_count = 0usize;
    for chunk in images.chunks(opts.batch_size.max(1)) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let x = Image::stack(&refs, &device)?;
        let z = codec.encode_raw(&x)?;
        latent_sq += z.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        latent_count += z.elem_count();
        let r = codec.decode_raw(&z)?;
        sum_sq += (r - &x)?.sqr()?.sum_all()?.to_scalar::<f32>()? as f64;
        count += x.elem_count();
    }
    let rms = (latent_sq / latent_count as f64).sqrt().max(1e-6);
    let scale = Tensor::new(&[(1.0 / rms) as f32], &device)?;
    map.data()
        .lock()
        .unwrap()
        .get("latent_scale")
        .ok_or_else(|| Error::config("codec map lacks latent_scale"))?
        .set(&scale)?;
    Ok(sum_sq / count as f64)
}
