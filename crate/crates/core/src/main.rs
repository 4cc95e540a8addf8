use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use jepaflow::data::{foundation_proxy, Dataset, Manifest, ManifestFrame, ManifestRoi, EMBEDDING_PATCH};
use jepaflow::rollout::{diagnostics_table, frame_strip, rollout, BlurPredictor, PersistencePredictor};
use jepaflow::train::{
    ablation_table, evaluate, load_checkpoint, load_data, run_ablation, AblationVariant, Model, Pipeline, TrainConfig,
    Trainer,
};

#[derive(Parser)]
#[command(name = "jepaflow", version, about = "Next-frame forecasting for image sequences")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Toy,
    Full,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; the selected profile is used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "toy")]
    profile: Profile,
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => match self.profile {
                Profile::Toy => TrainConfig::toy(),
                Profile::Full => TrainConfig::full(),
            },
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train the full pipeline and write a checkpoint plus a JSONL log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Optimisation steps (defaults to the configured epochs).
        #[arg(long)]
        steps: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Score single-step predictions on the validation split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        strength: Option<f64>,
    },
    /// Compare loss-term subsets of the joint-embedding objective.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Epochs per variant (defaults to the configured epochs).
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value = "ABCDE")]
        variants: String,
        #[arg(long, default_value = "runs")]
        out: PathBuf,
    },
    /// Autoregressive rollout from the first validation frame.
    Rollout {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 6)]
        horizon: usize,
        #[arg(long)]
        strength: Option<f64>,
        #[arg(long, default_value = "runs/rollout.png")]
        out: PathBuf,
    },
    /// Write the synthetic dataset as PNG tiles, embeddings and a manifest.
    SynthData {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "synthetic")]
        out: PathBuf,
    },
}

fn load_model(cfg: &TrainConfig, path: &Path, device: &Device) -> Result<Model> {
    let tensors = load_checkpoint(path, device)?;
    Ok(Model::from_tensors(cfg, device, &tensors)?)
}

fn write_synthetic(cfg: &TrainConfig, out: &Path) -> Result<()> {
    let data = Dataset::synthetic(&cfg.data.synthetic)?;
    let mut manifest = Manifest::default();
    let mut by_roi: Vec<(String, Vec<(chrono::NaiveDate, &jepaflow::Image)>)> = Vec::new();
    for s in data.iter() {
        let pos = match by_roi.iter().position(|(id, _)| *id == s.roi_id) {
            Some(p) => p,
            None => {
                by_roi.push((s.roi_id.clone(), vec![(s.timestamps.0, &s.frame_t)]));
                by_roi.len() - 1
            }
        };
        by_roi[pos].1.push((s.timestamps.1, &s.frame_t1));
    }
    for (id, frames) in by_roi {
        let dir = out.join(&id);
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut roi = ManifestRoi {
            id: id.clone(),
            frames: Vec::new(),
        };
        for (date, frame) in frames {
            let image = PathBuf::from(&id).join(format!("{date}.png"));
            let embedding = PathBuf::from(&id).join(format!("{date}.emb"));
            frame.save_png(&out.join(&image))?;
            foundation_proxy(frame, EMBEDDING_PATCH)?.save(&out.join(&embedding))?;
            roi.frames.push(ManifestFrame {
                image,
                embedding: Some(embedding),
                date: Some(date),
            });
        }
        manifest.roi.push(roi);
    }
    let path = out.join("manifest.toml");
    std::fs::write(&path, manifest.to_toml()).with_context(|| format!("writing {}", path.display()))?;
    println!("wrote {} pairs to {}", data.len(), out.display());
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let device = Device::Cpu;
    match cli.command {
        Command::Train {
            common,
            steps,
            checkpoint,
            out,
        } => {
            let cfg = common.load()?;
            let (train, _) = load_data(&cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            std::fs::write(out.join("config.toml"), cfg.to_toml()?)?;
            let mut trainer = match checkpoint {
                Some(p) => Trainer::from_checkpoint(&cfg, train, &p, &device)?,
                None => Trainer::new(&cfg, train, &device)?,
            };
            let remaining = trainer.total_steps().saturating_sub(trainer.step_index());
            let steps = steps.unwrap_or(remaining);
            let log_path = out.join("train.jsonl");
            let mut log = BufWriter::new(File::create(&log_path)?);
            let records = trainer.run(steps, Some(&mut log), Some(&out))?;
            log.flush()?;
            let ckpt = out.join("final.safetensors");
            trainer.save_checkpoint(&ckpt)?;
            if let (Some(first), Some(last)) = (records.first(), records.last()) {
                println!(
                    "steps {}..{}: loss {:.4} -> {:.4}, alpha {:.3}",
                    first.step, last.step, first.total, last.total, last.alpha
                );
            }
            println!("checkpoint {}\nlog {}", ckpt.display(), log_path.display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            strength,
        } => {
            let mut cfg = common.load()?;
            if let Some(s) = strength {
                cfg.sampler.strength = s;
            }
            let (_, val) = load_data(&cfg)?;
            let model = load_model(&cfg, &checkpoint, &device)?;
            let report = evaluate(&model, &val, &cfg.sampler, cfg.seed)?;
            print!("{}", report.table());
            println!("{}", serde_json::to_string(&report.model)?);
        }
        Command::Ablate {
            common,
            epochs,
            variants,
            out,
        } => {
            let cfg = common.load()?;
            let variants = variants
                .chars()
                .map(AblationVariant::parse)
                .collect::<jepaflow::Result<Vec<_>>>()?;
            let (train, val) = load_data(&cfg)?;
            let curves = run_ablation(&cfg, &train, &val, &variants, epochs.unwrap_or(cfg.epochs), &device)?;
            let table = ablation_table(&curves);
            print!("{table}");
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&curves)?)?;
        }
        Command::Rollout {
            common,
            checkpoint,
            horizon,
            strength,
            out,
        } => {
            let mut cfg = common.load()?;
            if let Some(s) = strength {
                cfg.sampler.strength = s;
            }
            let (train, val) = load_data(&cfg)?;
            let Some(first) = val.get(0) else {
                bail!("validation split is empty");
            };
            let mut chain: Vec<_> = train
                .iter()
                .chain(val.iter())
                .filter(|s| s.roi_id == first.roi_id && s.timestamps.0 >= first.timestamps.0)
                .collect();
            chain.sort_by_key(|s| s.timestamps.0);
            let mut truth: Vec<jepaflow::Image> = Vec::new();
            let mut at = first.timestamps.0;
            for s in chain {
                if s.timestamps.0 != at {
                    break;
                }
                truth.push(s.frame_t1.clone());
                at = s.timestamps.1;
            }
            let model = load_model(&cfg, &checkpoint, &device)?;
            let pipeline = Pipeline {
                model: &model,
                sampler: cfg.sampler.clone(),
            };
            let traces = vec![
                rollout(&pipeline, &first.frame_t, horizon, cfg.seed, &truth)?,
                rollout(&BlurPredictor::default(), &first.frame_t, horizon, cfg.seed, &truth)?,
                rollout(&PersistencePredictor, &first.frame_t, horizon, cfg.seed, &truth)?,
            ];
            print!("{}", diagnostics_table(&traces));
            if let Some(dir) = out.parent() {
                std::fs::create_dir_all(dir)?;
            }
            frame_strip(&traces, 2)?.save_png(&out)?;
            info!("strip written to {}", out.display());
        }
        Command::SynthData { common, out } => {
            let cfg = common.load()?;
            write_synthetic(&cfg, &out)?;
        }
    }
    Ok(())
}
