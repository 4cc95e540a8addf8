//! Training orchestration: configuration profiles and schedules, the
//! assembled model, the training loop with checkpoints, the loss ablation
//! and evaluation.

mod ablation;
mod config;
mod evaluate;
mod model;
mod trainer;

pub use ablation::{ablation_table, run_ablation, AblationCurve, AblationVariant};
pub use config::{BasePretraining, DataConfig, EmaConfig, FlowConfig, Schedule, TileSource, TrainConfig};
pub use evaluate::{evaluate, predict_split, score, Evaluation};
pub use model::{Batch, ForwardOutput, Model, Pipeline};
pub use trainer::{checkpoint_step, load_checkpoint, stream_rng, StepRecord, Trainer};

use crate::data::{load_tile_dataset, split_dataset, Dataset};
use crate::error::Result;

/// Loads the configured data source and splits it into train and validation.
pub fn load_data(cfg: &TrainConfig) -> Result<(Dataset, Dataset)> {
    let all = match &cfg.data.tiles {
        Some(t) => load_tile_dataset(&t.root, &t.manifest)?,
        None => Dataset::synthetic(&cfg.data.synthetic)?,
    };
    split_dataset(&all, cfg.data.train_fraction, cfg.data.split_seed)
}
