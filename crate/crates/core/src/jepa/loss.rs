use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::gather_tokens;

/// Which positions the L1 and cosine terms average over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconstructionScope {
    #[default]
    MaskedOnly,
    AllTokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JepaLossWeights {
    pub l1: f64,
    pub cosine: f64,
    pub spatial: f64,
    pub contrast: f64,
    pub feature: f64,
    pub temperature: f64,
    pub scope: ReconstructionScope,
}

impl Default for JepaLossWeights {
    fn default() -> Self {
        Self {
            l1: 20.0,
            cosine: 2.0,
            spatial: 2.0,
            contrast: 0.5,
            feature: 5.0,
            temperature: 0.1,
            scope: ReconstructionScope::MaskedOnly,
        }
    }
}

impl JepaLossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.l1, self.cosine, self.spatial, self.contrast, self.feature];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!(
                "loss weights must be finite and non-negative: {w:?}"
            )));
        }
        if self.temperature.is_nan() || self.temperature <= 0.0 {
            return Err(Error::config(format!(
                "contrastive temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

pub struct JepaLossInput<'a> {
    /// Predictor output `B×N×D`.
    pub pred: &'a Tensor,
    /// Target-encoder tokens `B×N×D`; detached inside the loss.
    pub target: &'a Tensor,
    /// Target-masked positions used when the scope is `MaskedOnly`.
    pub target_indices: &'a [usize],
    /// Projected predictor output `B×N×64`.
    pub projected: Option<&'a Tensor>,
    /// Foundation embeddings `B×N×64`.
    pub foundation: Option<&'a Tensor>,
}

/// Weighted total plus the unweighted value of every term.
#[derive(Clone, Debug)]
pub struct JepaLoss {
    pub total: Tensor,
    pub l1: f64,
    pub cosine: f64,
    pub spatial: f64,
    pub contrast: f64,
    pub feature: f64,
}

impl JepaLoss {
    pub fn terms(&self) -> [(&'static str, f64); 5] {
        [
            ("l1", self.l1),
            ("cosine", self.cosine),
            ("spatial", self.spatial),
            ("contrast", self.contrast),
            ("feature", self.feature),
        ]
    }

    pub fn total_value(&self) -> Result<f64> {
        Ok(self.total.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

fn breakdown(terms: &[(&str, f64)]) -> String {
    terms
        .iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Per-(sample, channel) standard deviation across token positions of a
/// `B×N×D` grid: `B×D`.
pub fn spatial_std(tokens: &Tensor) -> Result<Tensor> {
    let mean = tokens.mean_keepdim(1)?;
    let var = tokens.broadcast_sub(&mean)?.sqr()?.mean(1)?;
    Ok((var + 1e-6)?.sqrt()?)
}

fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

fn cross_entropy_diag(logits: &Tensor) -> Result<Tensor> {
    let b = logits.dim(0)?;
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    let eye = Tensor::eye(b, logits.dtype(), logits.device())?;
    Ok(((logp * eye)?.sum_all()?.neg()? / b as f64)?)
}

/// Hybrid objective: masked L1 and cosine reconstruction, spatial-std
/// matching, symmetric in-batch InfoNCE on mean-pooled embeddings, and L1
/// regression of the projected tokens onto foundation embeddings.
pub fn jepa_loss(input: &JepaLossInput, weights: &JepaLossWeights) -> Result<JepaLoss> {
    weights.validate()?;
    let pred = input.pred;
    let target = input.target.detach();
    if pred.shape() != target.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let (_, n, _) = pred.dims3()?;

    let (p_rec, t_rec) = match weights.scope {
        ReconstructionScope::AllTokens => (pred.clone(), target.clone()),
        ReconstructionScope::MaskedOnly => {
            if input.target_indices.is_empty() || input.target_indices.iter().any(|&i| i >= n) {
                return Err(Error::shape(format!(
                    "target indices must be a non-empty subset of 0..{n}"
                )));
            }
            (
                gather_tokens(pred, input.target_indices)?,
                gather_tokens(&target, input.target_indices)?,
            )
        }
    };
    let l1 = (&p_rec - &t_rec)?.abs()?.mean_all()?;

    let dot = (&p_rec * &t_rec)?.sum(D::Minus1)?;
    let np = (p_rec.sqr()?.sum(D::Minus1)? + 1e-12)?.sqrt()?;
    let nt = (t_rec.sqr()?.sum(D::Minus1)? + 1e-12)?.sqrt()?;
    let cos = (dot / (np * nt)?)?;
    let cosine = cos.affine(-1.0, 1.0)?.mean_all()?;

    let spatial = (spatial_std(pred)? - spatial_std(&target)?)?.sqr()?.mean_all()?;

    let zp = l2_normalize(&pred.mean(1)?)?;
    let zt = l2_normalize(&target.mean(1)?)?;
    let logits = (zp.matmul(&zt.t()?)? / weights.temperature)?;
    let contrast = ((cross_entropy_diag(&logits)? + cross_entropy_diag(&logits.t()?)?)? * 0.5)?;

    let feature = match (input.projected, input.foundation) {
        (Some(p), Some(f)) => {
            let f = f.detach().to_dtype(p.dtype())?;
            if p.shape() != f.shape() {
                return Err(Error::shape(format!(
                    "projection {:?} vs foundation embedding {:?}",
                    p.shape(),
                    f.shape()
                )));
            }
            Some((p - f)?.abs()?.mean_all()?)
        }
        _ => None,
    };

    let values = [
        ("l1", scalar(&l1)?),
        ("cosine", scalar(&cosine)?),
        ("spatial", scalar(&spatial)?),
        ("contrast", scalar(&contrast)?),
        ("feature", feature.as_ref().map(scalar).transpose()?.unwrap_or(0.0)),
    ];
    if let Some((name, _)) = values.iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: name.to_string(),
            breakdown: breakdown(&values),
        });
    }

    let mut total = ((l1 * weights.l1)? + (cosine * weights.cosine)?)?;
    total = (total + (spatial * weights.spatial)?)?;
    total = (total + (contrast * weights.contrast)?)?;
    if let Some(f) = feature {
        total = (total + (f * weights.feature)?)?;
    }
    Ok(JepaLoss {
        total,
        l1: values[0].1,
        cosine: values[1].1,
        spatial: values[2].1,
        contrast: values[3].1,
        feature: values[4].1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn t(data: Vec<f64>, shape: (usize, usize, usize)) -> Tensor {
        Tensor::from_vec(data, shape, &Device::Cpu).unwrap()
    }

    fn rand(shape: (usize, usize, usize), seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2;
        t((0..n).map(|_| rng.random_range(-1.0..1.0)).collect(), shape)
    }

    #[test]
    fn identity_zeroes_reconstruction_terms() {
        let x = rand((2, 8, 4), 1);
        let f = rand((2, 8, 64), 2);
        let idx = [1, 2, 5];
        let loss = jepa_loss(
            &JepaLossInput {
                pred: &x,
                target: &x,
                target_indices: &idx,
                projected: Some(&f),
                foundation: Some(&f),
            },
            &JepaLossWeights::default(),
        )
        .unwrap();
        assert_eq!(loss.l1, 0.0);
        assert!(loss.cosine.abs() < 1e-12);
        assert_eq!(loss.spatial, 0.0);
        assert_eq!(loss.feature, 0.0);
    }

    #[test]
    fn two_way_infonce_closed_form() {
        // pooled embeddings are orthogonal unit vectors e0 and e1
        let mut data = vec![0.0; 2 * 2 * 3];
        for tok in 0..2 {
            data[tok * 3] = 1.0;
            data[6 + tok * 3 + 1] = 1.0;
        }
        let x = t(data, (2, 2, 3));
        let loss = jepa_loss(
            &JepaLossInput {
                pred: &x,
                target: &x,
                target_indices: &[0, 1],
                projected: None,
                foundation: None,
            },
            &JepaLossWeights::default(),
        )
        .unwrap();
        let expected = -(10f64.exp() / (10f64.exp() + 1.0)).ln();
        assert!((loss.contrast - expected).abs() < 1e-12, "{}", loss.contrast);
    }

    #[test]
    fn total_is_the_weighted_sum() {
        let p = rand((3, 9, 5), 3);
        let q = rand((3, 9, 5), 4);
        let pr = rand((3, 9, 64), 5);
        let fd = rand((3, 9, 64), 6);
        let w = JepaLossWeights::default();
        let loss = jepa_loss(
            &JepaLossInput {
                pred: &p,
                target: &q,
                target_indices: &[0, 4, 8],
                projected: Some(&pr),
                foundation: Some(&fd),
            },
            &w,
        )
        .unwrap();
        let hand = 20.0 * loss.l1 + 2.0 * loss.cosine + 2.0 * loss.spatial + 0.5 * loss.contrast + 5.0 * loss.feature;
        assert!((loss.total_value().unwrap() - hand).abs() < 1e-10);
        assert!(loss.terms().iter().all(|(_, v)| *v > 0.0));
    }

    #[test]
    fn masked_and_full_scope_differ() {
        let p = rand((1, 16, 4), 7);
        let q = rand((1, 16, 4), 8);
        let run = |scope| {
            let w = JepaLossWeights {
                scope,
                ..Default::default()
            };
            jepa_loss(
                &JepaLossInput {
                    pred: &p,
                    target: &q,
                    target_indices: &[3],
                    projected: None,
                    foundation: None,
                },
                &w,
            )
            .unwrap()
            .l1
        };
        let manual: f64 = {
            let a: Vec<Vec<Vec<f64>>> = p.to_vec3().unwrap();
            let b: Vec<Vec<Vec<f64>>> = q.to_vec3().unwrap();
            (0..4).map(|c| (a[0][3][c] - b[0][3][c]).abs()).sum::<f64>() / 4.0
        };
        assert!((run(ReconstructionScope::MaskedOnly) - manual).abs() < 1e-12);
        assert!((run(ReconstructionScope::AllTokens) - manual).abs() > 1e-6);
    }

    #[test]
    fn nan_reports_the_term() {
        let mut v = vec![0.5; 2 * 4 * 3];
        v[0] = f64::NAN;
        let p = t(v, (2, 4, 3));
        let q = rand((2, 4, 3), 9);
        let err = jepa_loss(
            &JepaLossInput {
                pred: &p,
                target: &q,
                target_indices: &[0],
                projected: None,
                foundation: None,
            },
            &JepaLossWeights::default(),
        )
        .unwrap_err();
        match err {
            Error::NonFinite { term, breakdown } => {
                assert_eq!(term, "l1");
                assert!(breakdown.contains("spatial="));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn target_receives_no_gradient() {
        let p = Var::from_tensor(&rand((2, 4, 3), 10)).unwrap();
        let q = Var::from_tensor(&rand((2, 4, 3), 11)).unwrap();
        let loss = jepa_loss(
            &JepaLossInput {
                pred: p.as_tensor(),
                target: q.as_tensor(),
                target_indices: &[0, 2],
                projected: None,
                foundation: None,
            },
            &JepaLossWeights::default(),
        )
        .unwrap();
        let grads = loss.total.backward().unwrap();
        assert!(grads.get(p.as_tensor()).is_some());
        assert!(grads.get(q.as_tensor()).is_none());
    }

    #[test]
    fn rejects_bad_weights() {
        let w = JepaLossWeights {
            temperature: 0.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
        let w = JepaLossWeights {
            spatial: -1.0,
            ..Default::default()
        };
        assert!(w.validate().is_err());
    }
}
