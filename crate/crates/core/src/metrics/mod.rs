//! Image-quality metrics: L1, MSE, PSNR, SSIM, gradient SSIM, a pluggable
//! perceptual distance and the Fréchet distance between feature sets.

mod fid;
mod lpips;
mod pixel;
mod ssim;

pub use fid::{fid, frechet_distance, sqrtm_psd, FID_SHRINKAGE};
pub use lpips::{lpips, FeatureExtractor, FeatureMap, RandomConvExtractor};
pub use pixel::{pixel_metrics, psnr_from_mse, PixelMetrics, PSNR_CAP_DB};
pub use ssim::{gssim, sobel_magnitude, ssim, ssim_planes, C1, C2, SSIM_SIGMA, SSIM_WINDOW};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Averages over an evaluation split. `lpips` and `fid` are `None` when no
/// extractor or feature sets were supplied.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub l1: f64,
    pub mse: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub gssim: f64,
    pub lpips: Option<f64>,
    pub fid: Option<f64>,
    pub sample_count: usize,
    pub lpips_extractor: Option<String>,
}

impl MetricReport {
    pub fn table_header() -> String {
        format!(
            "{:<12} {:>8} {:>8} {:>8} {:>8} {:>8} {:>8} {:>9} {:>5}",
            "model", "L1", "MSE", "PSNR", "SSIM", "GSSIM", "LPIPS", "FID", "n"
        )
    }

    pub fn table_row(&self, model: &str) -> String {
        let opt = |v: Option<f64>, w: usize| match v {
            Some(v) => format!("{v:>w$.4}"),
            None => format!("{:>w$}", "n/a"),
        };
        format!(
            "{:<12} {:>8.4} {:>8.5} {:>8.3} {:>8.4} {:>8.4} {} {} {:>5}",
            model,
            self.l1,
            self.mse,
            self.psnr,
            self.ssim,
            self.gssim,
            opt(self.lpips, 8),
            opt(self.fid, 9),
            self.sample_count
        )
    }
}

/// `(predicted, real)` feature sets, one vector per image.
pub type FeaturePair<'a> = (&'a [Vec<f64>], &'a [Vec<f64>]);

/// Per-pair metrics averaged over `(prediction, target)` pairs. FID runs on
/// the supplied `(predicted, real)` feature sets.
pub fn evaluate_predictions(
    pairs: &[(Image, Image)],
    extractor: Option<&dyn FeatureExtractor>,
    fid_features: Option<FeaturePair<'_>>,
) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let n = pairs.len() as f64;
    let mut acc = [0.0f64; 6];
    for (pred, target) in pairs {
        let px = pixel_metrics(pred, target)?;
        acc[0] += px.l1;
        acc[1] += px.mse;
        acc[2] += px.psnr;
        acc[3] += ssim(pred, target)?;
        acc[4] += gssim(pred, target)?;
        if let Some(ex) = extractor {
            acc[5] += lpips(pred, target, Some(ex))?;
        }
    }
    let fid = fid_features.map(|(a, b)| fid(a, b)).transpose()?;
    Ok(MetricReport {
        l1: acc[0] / n,
        mse: acc[1] / n,
        psnr: acc[2] / n,
        ssim: acc[3] / n,
        gssim: acc[4] / n,
        lpips: extractor.map(|_| acc[5] / n),
        fid,
        sample_count: pairs.len(),
        lpips_extractor: extractor.map(|e| e.name().to_string()),
    })
}
