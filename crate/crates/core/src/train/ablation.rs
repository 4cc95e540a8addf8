use std::fmt::Write as _;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::trainer::Trainer;
use crate::data::{Dataset, SequenceSample};
use crate::error::{Error, Result};
use crate::jepa::JepaLossWeights;

/// Loss-term subsets compared by the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AblationVariant {
    /// L1 reconstruction only.
    A,
    /// L1, cosine and feature regression; no spatial or contrastive term.
    B,
    /// B plus the spatial-variance term.
    C,
    /// B plus the contrastive term.
    D,
    /// Every term.
    E,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 5] = [Self::A, Self::B, Self::C, Self::D, Self::E];

    pub fn id(self) -> char {
        match self {
            Self::A => 'A',
            Self::B => 'B',
            Self::C => 'C',
            Self::D => 'D',
            Self::E => 'E',
        }
    }

    pub fn parse(c: char) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.id() == c.to_ascii_uppercase())
            .ok_or_else(|| Error::config(format!("unknown ablation variant `{c}`")))
    }

    /// `[l1, cosine, spatial, contrast, feature]` switches.
    pub fn enabled(self) -> [bool; 5] {
        match self {
            Self::A => [true, false, false, false, false],
            Self::B => [true, true, false, false, true],
            Self::C => [true, true, true, false, true],
            Self::D => [true, true, false, true, true],
            Self::E => [true; 5],
        }
    }

    /// `base` with the disabled terms zeroed.
    pub fn weights(self, base: &JepaLossWeights) -> JepaLossWeights {
        let [l1, cos, sp, con, feat] = self.enabled();
        let on = |flag: bool, w: f64| if flag { w } else { 0.0 };
        JepaLossWeights {
            l1: on(l1, base.l1),
            cosine: on(cos, base.cosine),
            spatial: on(sp, base.spatial),
            contrast: on(con, base.contrast),
            feature: on(feat, base.feature),
            ..base.clone()
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationCurve {
    pub variant: AblationVariant,
    /// Unweighted `[l1, cosine, spatial, contrast, feature]` at step 0.
    pub step0_terms: [f64; 5],
    /// Per-epoch validation cosine similarity to target tokens.
    pub cosine: Vec<f64>,
    /// Per-epoch validation spatial standard deviation of forecasts.
    pub spatial_std: Vec<f64>,
    /// Per-epoch mean training loss.
    pub train_loss: Vec<f64>,
}

impl AblationCurve {
    pub fn final_spatial_std(&self) -> f64 {
        self.spatial_std.last().copied().unwrap_or(f64::NAN)
    }

    pub fn final_cosine(&self) -> f64 {
        self.cosine.last().copied().unwrap_or(f64::NAN)
    }
}

/// Trains every variant from the same seed on the same data (joint-embedding
/// objective only) and records validation curves after each epoch.
pub fn run_ablation(
    cfg: &TrainConfig,
    train: &Dataset,
    validation: &Dataset,
    variants: &[AblationVariant],
    epochs: usize,
    device: &Device,
) -> Result<Vec<AblationCurve>> {
    if variants.len() < 2 || !variants.contains(&AblationVariant::E) {
        return Err(Error::config("an ablation needs at least two variants including E"));
    }
    if validation.is_empty() {
        return Err(Error::Data("ablation needs a validation split".into()));
    }
    let mut cfg = cfg.clone();
    cfg.epochs = epochs.max(cfg.warmup_epochs);
    cfg.max_steps = None;
    let val: Vec<&SequenceSample> = validation.iter().collect();
    let mut curves = Vec::with_capacity(variants.len());
    for &variant in variants {
        let weights = variant.weights(&cfg.loss);
        let mut trainer = Trainer::jepa_only(&cfg, train.clone(), weights, device)?;
        let per_epoch = trainer.steps_per_epoch();
        let mut curve = AblationCurve {
            variant,
            step0_terms: [0.0; 5],
            cosine: Vec::with_capacity(epochs),
            spatial_std: Vec::with_capacity(epochs),
            train_loss: Vec::with_capacity(epochs),
        };
        for epoch in 0..epochs {
            let records = trainer.run(per_epoch, None, None)?;
            if epoch == 0 {
                let r = &records[0];
                curve.step0_terms = [r.l1, r.cosine, r.spatial, r.contrast, r.feature];
            }
            curve
                .train_loss
                .push(records.iter().map(|r| r.total).sum::<f64>() / records.len() as f64);
            let (cos, std) = trainer.model.forecast_agreement(&val)?;
            curve.cosine.push(cos);
            curve.spatial_std.push(std);
        }
        log::info!(
            "variant {}: cosine {:.4} spatial std {:.4}",
            variant.id(),
            curve.final_cosine(),
            curve.final_spatial_std()
        );
        curves.push(curve);
    }
    Ok(curves)
}

/// Per-epoch curves followed by the final comparison.
pub fn ablation_table(curves: &[AblationCurve]) -> String {
    let mut s = String::from("variant  epoch  train_loss  val_cosine  spatial_std\n");
    for c in curves {
        for e in 0..c.cosine.len() {
            let _ = writeln!(
                s,
                "{:<7}  {:>5}  {:<10.4}  {:<10.4}  {:.5}",
                c.variant.id(),
                e + 1,
                c.train_loss[e],
                c.cosine[e],
                c.spatial_std[e]
            );
        }
    }
    s.push_str("\nvariant  final_cosine  final_spatial_std\n");
    for c in curves {
        let _ = writeln!(
            s,
            "{:<7}  {:<12.4}  {:.5}",
            c.variant.id(),
            c.final_cosine(),
            c.final_spatial_std()
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_flags() {
        let w = JepaLossWeights::default();
        let e = AblationVariant::E.weights(&w);
        assert_eq!(e, w);
        let b = AblationVariant::B.weights(&w);
        assert_eq!((b.spatial, b.contrast), (0.0, 0.0));
        assert_eq!((b.l1, b.cosine, b.feature), (w.l1, w.cosine, w.feature));
        let a = AblationVariant::A.weights(&w);
        assert_eq!(a.cosine + a.spatial + a.contrast + a.feature, 0.0);
        assert_eq!(AblationVariant::parse('c').unwrap(), AblationVariant::C);
        assert!(AblationVariant::parse('z').is_err());
    }
}
