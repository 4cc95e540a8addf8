use jepaflow::adapter::AdapterConfig;
use jepaflow::data::{Dataset, SyntheticConfig};
use jepaflow::flow::{BackboneConfig, CodecConfig};
use jepaflow::jepa::{PredictorConfig, VitConfig};
use jepaflow::train::TrainConfig;

/// 32 px frames and the narrowest networks that still pass validation.
pub fn tiny() -> TrainConfig {
    let mut cfg = TrainConfig::toy();
    cfg.batch_size = 2;
    cfg.epochs = 2;
    cfg.data.synthetic = SyntheticConfig {
        rois: 2,
        steps: 3,
        size: 32,
        seed: 3,
    };
    cfg.encoder = VitConfig {
        image_size: 32,
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        ..VitConfig::default()
    };
    cfg.predictor = PredictorConfig {
        embed_dim: 16,
        depth: 1,
        num_heads: 2,
        ..PredictorConfig::default()
    };
    cfg.adapter = AdapterConfig {
        semantic_dim: 16,
        hidden_dim: 16,
        cross_dim: 32,
        pooled_dim: 16,
        max_semantic_tokens: 16,
        ..AdapterConfig::default()
    };
    cfg.codec = CodecConfig {
        channels: [4, 8, 8],
        ..CodecConfig::default()
    };
    cfg.codec_training.steps = 5;
    cfg.backbone = BackboneConfig {
        latent_size: 4,
        hidden_dim: 16,
        depth: 1,
        num_heads: 2,
        cross_dim: 32,
        pooled_dim: 16,
        ..BackboneConfig::default()
    };
    cfg.base_pretraining.steps = 5;
    cfg.sampler.steps = 3;
    cfg
}

pub fn tiny_data(cfg: &TrainConfig) -> Dataset {
    Dataset::synthetic(&cfg.data.synthetic).expect("synthetic data")
}
