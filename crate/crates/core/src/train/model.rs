use std::collections::{BTreeMap, HashMap};

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{VarBuilder, VarMap};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::TrainConfig;
use crate::adapter::{coarse_reference, Adapter, ConditioningBundle};
use crate::data::SequenceSample;
use crate::error::{Error, Result};
use crate::flow::{
    diffusion_loss, make_flow_sample, pretrain_codec, sample, weights_digest, Backbone, Codec, DiffusionLoss,
    SamplerConfig,
};
use crate::image::Image;
use crate::jepa::{
    jepa_loss, sample_mask, spatial_std, JepaLoss, JepaLossInput, JepaLossWeights, MaskSpec, Predictor, ProjectionHead,
    VitEncoder,
};
use crate::nn::{frozen_tensors, sorted_vars, SeededInit};
use crate::optim::{AdamW, AdamWConfig};
use crate::rollout::FramePredictor;

const CODEC_SEED: u64 = 0xc0de;
const BASE_SEED: u64 = 0xba5e;

/// Tensors for one batch of pairs.
#[derive(Clone, Debug)]
pub struct Batch {
    pub frames_t: Tensor,
    pub frames_t1: Tensor,
    /// Coarse `32×32` copies of `frames_t`.
    pub reference: Tensor,
    /// `B×N×64` foundation embeddings, present only when every sample has one.
    pub foundation: Option<Tensor>,
}

impl Batch {
    pub fn from_samples(samples: &[&SequenceSample], device: &Device) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let t: Vec<&Image> = samples.iter().map(|s| &s.frame_t).collect();
        let t1: Vec<&Image> = samples.iter().map(|s| &s.frame_t1).collect();
        let refs = samples
            .iter()
            .map(|s| coarse_reference(&s.frame_t))
            .collect::<Result<Vec<_>>>()?;
        let foundation = if samples.iter().all(|s| s.target_embedding.is_some()) {
            let rows = samples
                .iter()
                .map(|s| s.target_embedding.as_ref().expect("checked").to_tensor(device))
                .collect::<Result<Vec<_>>>()?;
            Some(Tensor::stack(&rows, 0)?)
        } else {
            None
        };
        Ok(Self {
            frames_t: Image::stack(&t, device)?,
            frames_t1: Image::stack(&t1, device)?,
            reference: Image::stack(&refs.iter().collect::<Vec<_>>(), device)?,
            foundation,
        })
    }

    pub fn len(&self) -> usize {
        self.frames_t.dim(0).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output of one training forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `L_IJEPA + λ·L_diff`.
    pub total: Tensor,
    pub jepa: JepaLoss,
    pub diffusion: Option<DiffusionLoss>,
    pub alpha: f64,
    pub dropped: Vec<bool>,
    /// Mean spatial standard deviation of the predicted tokens.
    pub embedding_std: f64,
}

/// Every network of the pipeline plus the parameter stores behind them.
///
/// `online` holds everything the optimiser updates (context encoder,
/// predictor, projection head, adapter and LoRA deltas). `target` holds the
/// EMA encoder. The codec and generator base live in their own stores and
/// are only read through detached copies.
pub struct Model {
    cfg: TrainConfig,
    device: Device,
    pub online: VarMap,
    pub target: VarMap,
    pub codec_vars: VarMap,
    pub base_vars: VarMap,
    pub encoder: VitEncoder,
    pub target_encoder: VitEncoder,
    pub predictor: Predictor,
    pub projection: ProjectionHead,
    pub adapter: Adapter,
    pub codec: Codec,
    pub backbone: Backbone,
}

fn frozen_builder(map: &VarMap, device: &Device) -> VarBuilder<'static> {
    VarBuilder::from_tensors(frozen_tensors(map), DType::F32, device)
}

impl Model {
    /// Freshly initialised model; codec and base are untrained.
    pub fn new(cfg: &TrainConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let maps = [VarMap::new(), VarMap::new(), VarMap::new(), VarMap::new()];
        Self::assemble(cfg, device, maps)
    }

    /// Rebuilds a model from named tensors grouped as
    /// `online.*`, `target.*`, `codec.*` and `base.*`.
    pub fn from_tensors(cfg: &TrainConfig, device: &Device, tensors: &HashMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let maps = [VarMap::new(), VarMap::new(), VarMap::new(), VarMap::new()];
        let prefixes = ["online.", "target.", "codec.", "base."];
        let mut expected = [0usize; 4];
        for (key, t) in tensors {
            if let Some(i) = prefixes.iter().position(|p| key.starts_with(p)) {
                let name = &key[prefixes[i].len()..];
                maps[i]
                    .data()
                    .lock()
                    .unwrap()
                    .insert(name.to_string(), Var::from_tensor(&t.to_dtype(DType::F32)?)?);
                expected[i] += 1;
            }
        }
        let model = Self::assemble(cfg, device, maps).map_err(|e| match e {
            Error::Candle(c) => Error::Checkpoint(format!("checkpoint does not fit the config: {c}")),
            other => other,
        })?;
        for (i, map) in [&model.online, &model.target, &model.codec_vars, &model.base_vars]
            .into_iter()
            .enumerate()
        {
            let have = map.data().lock().unwrap().len();
            if have != expected[i] {
                return Err(Error::Checkpoint(format!(
                    "checkpoint has {} `{}` tensors, the config needs {have}",
                    expected[i], prefixes[i]
                )));
            }
        }
        Ok(model)
    }

    fn assemble(cfg: &TrainConfig, device: &Device, maps: [VarMap; 4]) -> Result<Self> {
        let [online, target, codec_vars, base_vars] = maps;
        let seed = cfg.seed;
        let ob = SeededInit::builder(&online, seed, DType::F32, device);
        let tb = SeededInit::builder(&target, seed, DType::F32, device);
        let n = cfg.encoder.num_patches();
        let encoder = VitEncoder::new(&cfg.encoder, ob.pp("encoder"))?;
        let target_encoder = VitEncoder::new(&cfg.encoder, tb.pp("encoder"))?;
        let predictor = Predictor::new(&cfg.predictor, cfg.encoder.embed_dim, n, ob.pp("predictor"))?;
        let projection = ProjectionHead::new(cfg.encoder.embed_dim, ob.pp("projection"))?;
        let adapter = Adapter::new(&cfg.adapter, ob.pp("adapter"))?;
        Codec::new(
            &cfg.codec,
            SeededInit::builder(&codec_vars, seed ^ CODEC_SEED, DType::F32, device),
        )?;
        Backbone::new(
            &cfg.backbone,
            SeededInit::builder(&base_vars, seed ^ BASE_SEED, DType::F32, device),
            None,
        )?;
        let codec = Codec::new(&cfg.codec, frozen_builder(&codec_vars, device))?;
        let backbone = Backbone::new(
            &cfg.backbone,
            frozen_builder(&base_vars, device),
            Some((&cfg.lora, ob.pp("lora"))),
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            device: device.clone(),
            online,
            target,
            codec_vars,
            base_vars,
            encoder,
            target_encoder,
            predictor,
            projection,
            adapter,
            codec,
            backbone,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Every tensor of the model under its store prefix.
    pub fn named_tensors(&self) -> HashMap<String, Tensor> {
        let mut out = HashMap::new();
        for (prefix, map) in [
            ("online.", &self.online),
            ("target.", &self.target),
            ("codec.", &self.codec_vars),
            ("base.", &self.base_vars),
        ] {
            for (name, var) in sorted_vars(map) {
                out.insert(format!("{prefix}{name}"), var.as_detached_tensor());
            }
        }
        out
    }

    /// SHA-256 over the generator base weights.
    pub fn base_digest(&self) -> Result<String> {
        let tensors: BTreeMap<String, Tensor> = sorted_vars(&self.base_vars)
            .into_iter()
            .map(|(k, v)| (k, v.as_detached_tensor()))
            .collect();
        weights_digest(&tensors)
    }

    fn rebuild_frozen(&mut self) -> Result<()> {
        self.codec = Codec::new(&self.cfg.codec, frozen_builder(&self.codec_vars, &self.device))?;
        let ob = SeededInit::builder(&self.online, self.cfg.seed, DType::F32, &self.device);
        self.backbone = Backbone::new(
            &self.cfg.backbone,
            frozen_builder(&self.base_vars, &self.device),
            Some((&self.cfg.lora, ob.pp("lora"))),
        )?;
        Ok(())
    }

    /// Fits the codec to `images` and freezes it. Returns the reconstruction MSE.
    pub fn pretrain_codec(&mut self, images: &[Image]) -> Result<f64> {
        let trainable = Codec::new(
            &self.cfg.codec,
            SeededInit::builder(&self.codec_vars, self.cfg.seed ^ CODEC_SEED, DType::F32, &self.device),
        )?;
        let mut opts = self.cfg.codec_training.clone();
        opts.seed ^= self.cfg.seed;
        let mse = pretrain_codec(&self.codec_vars, &trainable, images, &opts)?;
        self.rebuild_frozen()?;
        Ok(mse)
    }

    /// Unconditional velocity fit of the generator base on codec latents of
    /// `images`, after which the base is frozen. Returns the mean loss over
    /// the last tenth of the steps.
    pub fn pretrain_base(&mut self, images: &[Image]) -> Result<f64> {
        let opts = self.cfg.base_pretraining.clone();
        if images.is_empty() {
            return Err(Error::Data("no images to fit the generator base on".into()));
        }
        let mut latents = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let refs: Vec<&Image> = chunk.iter().collect();
            let z = self.codec.encode(&Image::stack(&refs, &self.device)?)?;
            for i in 0..z.dim(0)? {
                latents.push(z.get(i)?);
            }
        }
        let base = Backbone::new(
            &self.cfg.backbone,
            SeededInit::builder(&self.base_vars, self.cfg.seed ^ BASE_SEED, DType::F32, &self.device),
            None,
        )?;
        let mut opt = AdamW::new(sorted_vars(&self.base_vars), AdamWConfig::default())?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ BASE_SEED);
        let tokens = self.adapter.output_tokens(self.cfg.encoder.num_patches());
        let bs = opts.batch_size.max(1);
        let tail = (opts.steps / 10).max(1);
        let mut tail_loss = Vec::new();
        for step in 0..opts.steps {
            let picks: Vec<Tensor> = (0..bs)
                .map(|_| latents.choose(&mut rng).expect("non-empty").clone())
                .collect();
            let x0 = Tensor::stack(&picks, 0)?;
            let fs = make_flow_sample(&x0, &mut rng, &self.cfg.flow.sigma)?;
            let cond = ConditioningBundle::zeros(
                bs,
                tokens,
                self.cfg.backbone.cross_dim,
                self.cfg.backbone.pooled_dim,
                DType::F32,
                &self.device,
            )?;
            let v = base.forward(&fs.x_sigma, &fs.sigma_tensor()?, &cond)?;
            let loss = (v - &fs.v_star)?.sqr()?.mean_all()?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite {
                    term: "base_velocity_mse".into(),
                    breakdown: format!("step {step}"),
                });
            }
            if step + tail >= opts.steps {
                tail_loss.push(value);
            }
            let f = step as f64 / opts.steps as f64;
            let lr = opts.lr * 0.5 * (1.0 + (std::f64::consts::PI * f).cos());
            opt.step(&loss.backward()?, lr, 0.0)?;
        }
        self.rebuild_frozen()?;
        Ok(tail_loss.iter().sum::<f64>() / tail_loss.len().max(1) as f64)
    }

    fn cast(&self, t: &Tensor) -> Result<Tensor> {
        self.cfg.precision.cast(t)
    }

    /// Training forward pass: masked context encoding, prediction, hybrid
    /// loss and, when `diffusion` is set, the conditioned flow objective.
    pub fn forward_losses<R: Rng + ?Sized>(
        &self,
        batch: &Batch,
        rng: &mut R,
        weights: &JepaLossWeights,
        diffusion: bool,
    ) -> Result<ForwardOutput> {
        let n = self.cfg.encoder.num_patches();
        let mask = sample_mask(rng, n, &self.cfg.mask)?;
        let ctx = self.cast(&self.encoder.forward_context(&batch.frames_t, &mask.context)?)?;
        let pred = self.cast(&self.predictor.forward(&ctx, &mask)?)?;
        let target = self.target_encoder.forward(&batch.frames_t1)?.detach();
        let projected = self.projection.forward(&pred)?;
        let jepa = jepa_loss(
            &JepaLossInput {
                pred: &pred,
                target: &target,
                target_indices: &mask.target,
                projected: Some(&projected),
                foundation: batch.foundation.as_ref(),
            },
            weights,
        )?;
        let embedding_std = spatial_std(&pred)?.mean_all()?.to_scalar::<f32>()? as f64;
        if !diffusion {
            return Ok(ForwardOutput {
                total: jepa.total.clone(),
                alpha: self.adapter.alpha()?,
                dropped: Vec::new(),
                jepa,
                diffusion: None,
                embedding_std,
            });
        }
        let cond = self.adapter.forward(&pred, Some(&batch.reference), Some(rng))?;
        let cond = ConditioningBundle {
            h: self.cast(&cond.h)?,
            p: self.cast(&cond.p)?,
            ..cond
        };
        let x0 = self.codec.encode(&batch.frames_t1)?;
        let fs = make_flow_sample(&x0, rng, &self.cfg.flow.sigma)?;
        let v = self.cast(&self.backbone.forward(&fs.x_sigma, &fs.sigma_tensor()?, &cond)?)?;
        let preview = self.codec.decode(&fs.one_step_estimate(&v)?)?;
        let diff = diffusion_loss(&v, &fs.v_star, &preview, &batch.frames_t1, self.cfg.flow.lambda_ssim)?;
        let total = (&jepa.total + (&diff.total * self.cfg.sd_loss_weight)?)?;
        let value = total.to_scalar::<f32>()?;
        if !value.is_finite() {
            return Err(Error::NonFinite {
                term: "total".into(),
                breakdown: format!("jepa={:?} velocity_mse={} ssim={}", jepa.terms(), diff.mse, diff.ssim),
            });
        }
        Ok(ForwardOutput {
            total,
            alpha: cond.alpha,
            dropped: cond.dropped,
            jepa,
            diffusion: Some(diff),
            embedding_std,
        })
    }

    /// Forecast tokens of the next frame from full context: `B×N×D`.
    pub fn forecast_tokens(&self, frames: &Tensor) -> Result<Tensor> {
        let n = self.cfg.encoder.num_patches();
        let z = self.cast(&self.encoder.forward(frames)?)?;
        self.cast(&self.predictor.forward(&z, &MaskSpec::full(n)?)?)
    }

    /// Inference conditioning for a batch of current frames.
    pub fn condition(&self, frames: &[&Image]) -> Result<ConditioningBundle> {
        let x = Image::stack(frames, &self.device)?;
        let pred = self.forecast_tokens(&x)?;
        let refs = frames.iter().map(|f| coarse_reference(f)).collect::<Result<Vec<_>>>()?;
        let refs = Image::stack(&refs.iter().collect::<Vec<_>>(), &self.device)?;
        let cond = self.adapter.forward(&pred, Some(&refs), None::<&mut ChaCha8Rng>)?;
        Ok(ConditioningBundle {
            h: self.cast(&cond.h)?,
            p: self.cast(&cond.p)?,
            ..cond
        })
    }

    /// Full single-step pipeline: encode, predict, adapt and sample from the
    /// latent of the current frame.
    pub fn predict<R: Rng + ?Sized>(
        &self,
        frames: &[&Image],
        sampler: &SamplerConfig,
        rng: &mut R,
    ) -> Result<Vec<Image>> {
        let cond = self.condition(frames)?;
        let init = self.codec.encode(&Image::stack(frames, &self.device)?)?;
        let b = frames.len();
        let field = |x: &Tensor, s: f64| -> Result<Tensor> {
            let sigma = Tensor::full(s as f32, b, &self.device)?;
            self.cast(&self.backbone.forward(x, &sigma, &cond)?)
        };
        sample(&field, &self.codec, &init, sampler, rng)
    }

    /// Mean-pooled target-encoder tokens, one vector per image.
    pub fn pooled_features(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let x = Image::stack(chunk, &self.device)?;
            let f = self.target_encoder.forward(&x)?.mean(1)?.to_dtype(DType::F64)?;
            out.extend(f.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    /// Cosine similarity between full-context forecasts and target-encoder
    /// tokens of the true next frames, plus the forecasts' mean spatial std.
    pub fn forecast_agreement(&self, samples: &[&SequenceSample]) -> Result<(f64, f64)> {
        let (mut cos_sum, mut std_sum, mut count) = (0.0, 0.0, 0usize);
        for chunk in samples.chunks(16) {
            let batch = Batch::from_samples(chunk, &self.device)?;
            let pred = self.forecast_tokens(&batch.frames_t)?;
            let target = self.target_encoder.forward(&batch.frames_t1)?;
            let dot = (&pred * &target)?.sum(D::Minus1)?;
            let norms = (pred.sqr()?.sum(D::Minus1)?.sqrt()? * target.sqr()?.sum(D::Minus1)?.sqrt()?)?;
            let cos = (dot / (norms + 1e-8)?)?.mean(1)?;
            cos_sum += cos.sum_all()?.to_scalar::<f32>()? as f64;
            std_sum += spatial_std(&pred)?.mean(1)?.sum_all()?.to_scalar::<f32>()? as f64;
            count += chunk.len();
        }
        Ok((cos_sum / count as f64, std_sum / count as f64))
    }
}

/// The trained pipeline as a frame-to-frame forecaster.
pub struct Pipeline<'a> {
    pub model: &'a Model,
    pub sampler: SamplerConfig,
}

impl FramePredictor for Pipeline<'_> {
    fn name(&self) -> &str {
        "model"
    }

    fn predict(&self, frame: &Image, seed: u64) -> Result<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.model.predict(&[frame], &self.sampler, &mut rng)?;
        Ok(out.remove(0))
    }
}
