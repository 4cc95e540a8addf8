//! Paired-frame datasets: the procedural generator, the on-disk tile store,
//! semantic embedding fields, and the seeded train/validation split.

mod embedding;
mod synthetic;
mod tiles;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use embedding::{foundation_proxy, EmbeddingField, EMBEDDING_CHANNELS};
pub use synthetic::{generate_synthetic_sequence, SyntheticConfig};
pub use tiles::{load_tile_dataset, Manifest, ManifestFrame, ManifestRoi};

use crate::error::{Error, Result};
use crate::image::Image;

/// Spatial size of one embedding cell, equal to the encoder patch size.
pub const EMBEDDING_PATCH: usize = 8;

/// Frame sides must be multiples of this (encoder patch and codec factor).
pub const SIZE_MULTIPLE: usize = 8;

/// A consecutive `(t, t+1)` pair from one region of interest.
#[derive(Clone, Debug)]
pub struct SequenceSample {
    pub frame_t: Image,
    pub frame_t1: Image,
    /// Semantic embedding of `frame_t1` at patch resolution, when available.
    pub target_embedding: Option<EmbeddingField>,
    pub roi_id: String,
    pub timestamps: (NaiveDate, NaiveDate),
}

impl SequenceSample {
    pub fn new(
        frame_t: Image,
        frame_t1: Image,
        target_embedding: Option<EmbeddingField>,
        roi_id: impl Into<String>,
        timestamps: (NaiveDate, NaiveDate),
    ) -> Result<Self> {
        if !frame_t.same_shape(&frame_t1) {
            return Err(Error::Data("frames of a pair differ in shape".into()));
        }
        if timestamps.0 >= timestamps.1 {
            return Err(Error::Data(format!(
                "timestamps {} -> {} are not increasing",
                timestamps.0, timestamps.1
            )));
        }
        Ok(Self {
            frame_t,
            frame_t1,
            target_embedding,
            roi_id: roi_id.into(),
            timestamps,
        })
    }
}

/// Read-only collection of samples.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    samples: Vec<SequenceSample>,
}

impl Dataset {
    pub fn new(samples: Vec<SequenceSample>) -> Self {
        Self { samples }
    }

    /// `rois` independent synthetic sequences of `steps` frames each.
    pub fn synthetic(cfg: &SyntheticConfig) -> Result<Self> {
        let mut samples = Vec::new();
        for r in 0..cfg.rois {
            let seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add(r as u64);
            samples.extend(generate_synthetic_sequence(seed, cfg.steps, cfg.size)?);
        }
        Ok(Self { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&SequenceSample> {
        self.samples.get(i)
    }

    pub fn samples(&self) -> &[SequenceSample] {
        &self.samples
    }

    pub fn iter(&self) -> std::slice::Iter<'_, SequenceSample> {
        self.samples.iter()
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    pub fn frame_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.frame_t.height(), s.frame_t.width()))
    }
}

/// Seeded shuffle followed by a `train_fraction` / remainder partition.
/// Returns the index sets so callers can check disjointness.
pub fn split_indices(len: usize, train_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if len == 0 {
        return Err(Error::Data("cannot split an empty dataset".into()));
    }
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::config(format!("train fraction {train_fraction} outside [0, 1]")));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((len as f64) * train_fraction).round() as usize;
    let val = idx.split_off(n_train.min(len));
    Ok((idx, val))
}

pub fn split_dataset(dataset: &Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let (train, val) = split_indices(dataset.len(), train_fraction, seed)?;
    Ok((dataset.subset(&train), dataset.subset(&val)))
}

pub(crate) fn check_frame_size(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 || !h.is_multiple_of(SIZE_MULTIPLE) || !w.is_multiple_of(SIZE_MULTIPLE) {
        return Err(Error::config(format!(
            "frame size {h}x{w} is not a positive multiple of {SIZE_MULTIPLE}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn split_ten_is_eight_two() {
        let (t, v) = split_indices(10, 0.8, 0).unwrap();
        assert_eq!((t.len(), v.len()), (8, 2));
    }

    #[test]
    fn split_is_deterministic_partition() {
        let a = split_indices(37, 0.8, 0).unwrap();
        let b = split_indices(37, 0.8, 0).unwrap();
        assert_eq!(a, b);
        let train: HashSet<_> = a.0.iter().copied().collect();
        let val: HashSet<_> = a.1.iter().copied().collect();
        assert!(train.is_disjoint(&val));
        let all: HashSet<_> = train.union(&val).copied().collect();
        assert_eq!(all, (0..37).collect());
        assert_ne!(split_indices(37, 0.8, 1).unwrap(), a);
    }

    #[test]
    fn split_rejects_empty() {
        assert!(split_indices(0, 0.8, 0).is_err());
        assert!(split_dataset(&Dataset::default(), 0.8, 0).is_err());
    }

    #[test]
    fn sample_requires_increasing_time() {
        let im = Image::zeros(3, 8, 8);
        let d = NaiveDate::from_ymd_opt(2020, 1, 1).unwrap();
        assert!(SequenceSample::new(im.clone(), im.clone(), None, "a", (d, d)).is_err());
        let other = Image::zeros(3, 16, 8);
        let d2 = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        assert!(SequenceSample::new(im, other, None, "a", (d, d2)).is_err());
    }
}
