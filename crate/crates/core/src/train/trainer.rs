use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use candle_core::{Device, Tensor};
use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Schedule, TrainConfig};
use super::model::{Batch, Model};
use crate::data::{Dataset, SequenceSample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::jepa::{ema_update, EmaSchedule, JepaLossWeights};
use crate::nn::sorted_vars;
use crate::optim::{AdamW, AdamWConfig};

/// Deterministic RNG for a `(seed, stream, index)` triple.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&stream.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

const STREAM_STEP: u64 = 1;
const STREAM_EPOCH: u64 = 2;

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: u64,
    pub lr: f64,
    pub weight_decay: f64,
    pub tau: f64,
    pub total: f64,
    pub jepa: f64,
    pub l1: f64,
    pub cosine: f64,
    pub spatial: f64,
    pub contrast: f64,
    pub feature: f64,
    pub diffusion: Option<f64>,
    pub velocity_mse: Option<f64>,
    pub ssim: Option<f64>,
    pub alpha: f64,
    pub references_dropped: usize,
    pub batch_size: usize,
    pub embedding_std: f64,
}

pub struct Trainer {
    pub model: Model,
    cfg: TrainConfig,
    data: Dataset,
    opt: AdamW,
    schedule: Schedule,
    ema: EmaSchedule,
    weights: JepaLossWeights,
    diffusion: bool,
    step: u64,
    steps_per_epoch: u64,
}

impl Trainer {
    /// Builds the model, fits and freezes the codec and generator base on the
    /// training frames, and prepares the optimiser.
    pub fn new(cfg: &TrainConfig, data: Dataset, device: &Device) -> Result<Self> {
        let mut model = Model::new(cfg, device)?;
        let frames: Vec<Image> = data
            .iter()
            .flat_map(|s| [s.frame_t.clone(), s.frame_t1.clone()])
            .collect();
        let codec_mse = model.pretrain_codec(&frames)?;
        info!("codec reconstruction mse {codec_mse:.5}");
        let base_loss = model.pretrain_base(&frames)?;
        info!("generator base velocity mse {base_loss:.4}");
        Self::with_model(cfg, data, model, true, cfg.loss.clone())
    }

    /// Trains only the joint-embedding side with custom loss weights; the
    /// codec and generator are left untouched.
    pub fn jepa_only(cfg: &TrainConfig, data: Dataset, weights: JepaLossWeights, device: &Device) -> Result<Self> {
        let model = Model::new(cfg, device)?;
        Self::with_model(cfg, data, model, false, weights)
    }

    fn with_model(
        cfg: &TrainConfig,
        data: Dataset,
        model: Model,
        diffusion: bool,
        weights: JepaLossWeights,
    ) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let per_step = (cfg.batch_size * cfg.grad_accum) as u64;
        let steps_per_epoch = (data.len() as u64).div_ceil(per_step);
        let schedule = Schedule::new(cfg, steps_per_epoch);
        let vars = if diffusion {
            sorted_vars(&model.online)
        } else {
            sorted_vars(&model.online)
                .into_iter()
                .filter(|(n, _)| !n.starts_with("adapter.") && !n.starts_with("lora."))
                .collect()
        };
        let opt = AdamW::new(vars, AdamWConfig::default())?;
        Ok(Self {
            ema: cfg.ema_schedule(schedule.total_steps),
            model,
            cfg: cfg.clone(),
            data,
            opt,
            schedule,
            weights,
            diffusion,
            step: 0,
            steps_per_epoch,
        })
    }

    /// Resumes from a checkpoint written by [`Trainer::save_checkpoint`].
    pub fn from_checkpoint(cfg: &TrainConfig, data: Dataset, path: &Path, device: &Device) -> Result<Self> {
        let tensors = load_checkpoint(path, device)?;
        let model = Model::from_tensors(cfg, device, &tensors)?;
        let mut t = Self::with_model(cfg, data, model, true, cfg.loss.clone())?;
        let (mut m, mut v) = (HashMap::new(), HashMap::new());
        for (k, val) in &tensors {
            if let Some(name) = k.strip_prefix("optim.m.") {
                m.insert(name.to_string(), val.clone());
            } else if let Some(name) = k.strip_prefix("optim.v.") {
                v.insert(name.to_string(), val.clone());
            }
        }
        let step = checkpoint_step(&tensors)?;
        t.opt.load_state(&m, &v, step)?;
        t.step = step;
        Ok(t)
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = self.model.named_tensors();
        let (m, v) = self.opt.state();
        for (k, t) in m {
            tensors.insert(format!("optim.m.{k}"), t);
        }
        for (k, t) in v {
            tensors.insert(format!("optim.v.{k}"), t);
        }
        tensors.insert(
            "meta.step".into(),
            Tensor::new(&[self.step as i64], self.model.device())?,
        );
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> u64 {
        self.schedule.total_steps
    }

    pub fn dataset(&self) -> &Dataset {
        &self.data
    }

    fn micro_batches(&self, step: u64) -> Vec<Vec<&SequenceSample>> {
        let epoch = step / self.steps_per_epoch;
        let within = (step % self.steps_per_epoch) as usize;
        let mut order: Vec<usize> = (0..self.data.len()).collect();
        order.shuffle(&mut stream_rng(self.cfg.seed, STREAM_EPOCH, epoch));
        let bs = self.cfg.batch_size;
        (0..self.cfg.grad_accum)
            .map(|m| {
                let start = (within * self.cfg.grad_accum + m) * bs;
                (start..start + bs)
                    .map(|i| &self.data.samples()[order[i % order.len()]])
                    .collect()
            })
            .collect()
    }

    /// Loss of the next step without updating anything.
    pub fn peek_loss(&self) -> Result<f64> {
        let mut rng = stream_rng(self.cfg.seed, STREAM_STEP, self.step);
        let mut total = 0.0;
        for mb in self.micro_batches(self.step) {
            let batch = Batch::from_samples(&mb, self.model.device())?;
            let out = self
                .model
                .forward_losses(&batch, &mut rng, &self.weights, self.diffusion)?;
            total += out.total.to_scalar::<f32>()? as f64;
        }
        Ok(total / self.cfg.grad_accum as f64)
    }

    /// One optimiser step followed by the EMA update.
    pub fn step(&mut self) -> Result<StepRecord> {
        let t = self.step;
        let mut rng = stream_rng(self.cfg.seed, STREAM_STEP, t);
        let accum = self.cfg.grad_accum as f64;
        let mut outputs = Vec::with_capacity(self.cfg.grad_accum);
        let mut sum: Option<Tensor> = None;
        for mb in self.micro_batches(t) {
            let batch = Batch::from_samples(&mb, self.model.device())?;
            let out = self
                .model
                .forward_losses(&batch, &mut rng, &self.weights, self.diffusion)?;
            sum = Some(match sum {
                None => out.total.clone(),
                Some(s) => (s + &out.total)?,
            });
            outputs.push(out);
        }
        let loss = (sum.expect("at least one micro-batch") / accum)?;
        let lr = self.schedule.lr_at(t);
        let wd = self.schedule.weight_decay_at(t);
        self.opt.step(&loss.backward()?, lr, wd)?;
        let tau = ema_update(&self.model.online, &self.model.target, t, &self.ema)?;
        self.step += 1;

        let mean = |f: &dyn Fn(&super::model::ForwardOutput) -> f64| outputs.iter().map(f).sum::<f64>() / accum;
        let mean_opt = |f: &dyn Fn(&super::model::ForwardOutput) -> Option<f64>| {
            outputs.iter().map(f).sum::<Option<f64>>().map(|s| s / accum)
        };
        Ok(StepRecord {
            step: t,
            epoch: t / self.steps_per_epoch,
            lr,
            weight_decay: wd,
            tau,
            total: loss.to_scalar::<f32>()? as f64,
            jepa: mean(&|o| o.jepa.total_value().unwrap_or(f64::NAN)),
            l1: mean(&|o| o.jepa.l1),
            cosine: mean(&|o| o.jepa.cosine),
            spatial: mean(&|o| o.jepa.spatial),
            contrast: mean(&|o| o.jepa.contrast),
            feature: mean(&|o| o.jepa.feature),
            diffusion: mean_opt(&|o| {
                o.diffusion
                    .as_ref()
                    .and_then(|d| d.total.to_scalar::<f32>().ok().map(f64::from))
            }),
            velocity_mse: mean_opt(&|o| o.diffusion.as_ref().map(|d| d.mse)),
            ssim: mean_opt(&|o| o.diffusion.as_ref().map(|d| d.ssim)),
            alpha: outputs[0].alpha,
            references_dropped: outputs.iter().map(|o| o.dropped.iter().filter(|d| **d).count()).sum(),
            batch_size: self.cfg.batch_size * self.cfg.grad_accum,
            embedding_std: mean(&|o| o.embedding_std),
        })
    }

    /// Runs `steps` steps, writing one JSON record per line to `log` and a
    /// checkpoint to `checkpoint_dir` every `checkpoint_every` steps.
    pub fn run(
        &mut self,
        steps: u64,
        mut log: Option<&mut dyn Write>,
        checkpoint_dir: Option<&Path>,
    ) -> Result<Vec<StepRecord>> {
        let mut records = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = self.step()?;
            if let Some(w) = log.as_deref_mut() {
                let line = serde_json::to_string(&r).map_err(|e| Error::Data(e.to_string()))?;
                writeln!(w, "{line}").map_err(|e| Error::io("training log", e))?;
            }
            if r.step % 10 == 0 {
                info!("step {} loss {:.4} alpha {:.3}", r.step, r.total, r.alpha);
            }
            if let Some(dir) = checkpoint_dir {
                let every = self.cfg.checkpoint_every;
                if every > 0 && self.step.is_multiple_of(every) {
                    self.save_checkpoint(&dir.join(format!("step-{:06}.safetensors", self.step)))?;
                }
            }
            records.push(r);
        }
        Ok(records)
    }
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<HashMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::Checkpoint(format!("{} does not exist", path.display())));
    }
    candle_core::safetensors::load(path, device).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

pub fn checkpoint_step(tensors: &HashMap<String, Tensor>) -> Result<u64> {
    let t = tensors
        .get("meta.step")
        .ok_or_else(|| Error::Checkpoint("missing meta.step".into()))?;
    Ok(t.to_vec1::<i64>()?[0] as u64)
}
