use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::Model;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::flow::SamplerConfig;
use crate::image::Image;
use crate::metrics::{evaluate_predictions, FeatureExtractor, MetricReport, RandomConvExtractor};

/// Metric rows for the model and for the persistence ("Default") baseline
/// on the same pairs.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub model: MetricReport,
    pub persistence: MetricReport,
}

impl Evaluation {
    pub fn table(&self) -> String {
        format!(
            "{}\n{}\n{}\n",
            MetricReport::table_header(),
            self.persistence.table_row("Default"),
            self.model.table_row("Ours")
        )
    }
}

/// Single-step predictions for every pair of `split`; sample `i` draws its
/// sampler noise from `seed ^ i`.
pub fn predict_split(model: &Model, split: &Dataset, sampler: &SamplerConfig, seed: u64) -> Result<Vec<Image>> {
    split
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ i as u64);
            Ok(model.predict(&[&s.frame_t], sampler, &mut rng)?.remove(0))
        })
        .collect()
}

/// Scores `predictions` against the split's next frames, with FID on
/// mean-pooled target-encoder features.
pub fn score(
    model: &Model,
    split: &Dataset,
    predictions: &[Image],
    extractor: Option<&dyn FeatureExtractor>,
) -> Result<MetricReport> {
    if predictions.len() != split.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} pairs",
            predictions.len(),
            split.len()
        )));
    }
    let pairs: Vec<(Image, Image)> = predictions
        .iter()
        .zip(split.iter())
        .map(|(p, s)| (p.clone(), s.frame_t1.clone()))
        .collect();
    let pf = model.pooled_features(&predictions.iter().collect::<Vec<_>>())?;
    let tf = model.pooled_features(&split.iter().map(|s| &s.frame_t1).collect::<Vec<_>>())?;
    evaluate_predictions(&pairs, extractor, Some((&pf, &tf)))
}

pub fn evaluate(model: &Model, split: &Dataset, sampler: &SamplerConfig, seed: u64) -> Result<Evaluation> {
    if split.is_empty() {
        return Err(Error::Data("evaluation split is empty".into()));
    }
    let extractor = RandomConvExtractor::default();
    let preds = predict_split(model, split, sampler, seed)?;
    let persistence: Vec<Image> = split.iter().map(|s| s.frame_t.clone()).collect();
    Ok(Evaluation {
        model: score(model, split, &preds, Some(&extractor))?,
        persistence: score(model, split, &persistence, Some(&extractor))?,
    })
}
