//! Autoregressive rollout: each prediction is fed back as the next input,
//! with per-step spectral and variance diagnostics.

use std::fmt::Write as _;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, Plane};
use crate::metrics::{pixel_metrics, ssim};

/// Radius in cycles per pixel above which spectral energy counts as high
/// frequency (a quarter of Nyquist).
pub const HF_RADIUS: f64 = 0.125;

/// Anything that maps frame `t` to a forecast of frame `t+1`.
pub trait FramePredictor {
    fn name(&self) -> &str;

    fn predict(&self, frame: &Image, seed: u64) -> Result<Image>;
}

/// Returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct PersistencePredictor;

impl FramePredictor for PersistencePredictor {
    fn name(&self) -> &str {
        "persistence"
    }

    fn predict(&self, frame: &Image, _seed: u64) -> Result<Image> {
        Ok(frame.clone())
    }
}

/// Returns a Gaussian-blurred copy of its input.
#[derive(Clone, Copy, Debug)]
pub struct BlurPredictor {
    pub sigma: f64,
}

impl Default for BlurPredictor {
    fn default() -> Self {
        Self { sigma: 1.0 }
    }
}

impl FramePredictor for BlurPredictor {
    fn name(&self) -> &str {
        "blur"
    }

    fn predict(&self, frame: &Image, _seed: u64) -> Result<Image> {
        Ok(frame.gaussian_blur(self.sigma))
    }
}

fn hf_energy(plane: &Plane) -> f64 {
    let (h, w) = (plane.height, plane.width);
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = planner.plan_fft_forward(w);
    let col_fft = planner.plan_fft_forward(h);
    let mut buf: Vec<Complex<f64>> = plane.data.iter().map(|&v| Complex::new(v, 0.0)).collect();
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let mut col = vec![Complex::new(0.0, 0.0); h];
    let mut energy = 0.0;
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        let fx = (x.min(w - x)) as f64 / w as f64;
        for (y, c) in col.iter().enumerate() {
            let fy = (y.min(h - y)) as f64 / h as f64;
            if (fx * fx + fy * fy).sqrt() > HF_RADIUS {
                energy += c.norm_sqr();
            }
        }
    }
    energy
}

/// Spectral energy of the grayscale frame above [`HF_RADIUS`], relative to
/// the same quantity for `reference`.
pub fn hf_energy_ratio(frame: &Image, reference: &Image) -> Result<f64> {
    if !frame.same_shape(reference) {
        return Err(Error::shape(format!("{:?} vs {:?}", frame.dims(), reference.dims())));
    }
    let a = hf_energy(&frame.grayscale());
    let b = hf_energy(&reference.grayscale());
    Ok((a + 1e-12) / (b + 1e-12))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    /// 1-based step index.
    pub step: usize,
    pub hf_energy_ratio: f64,
    pub std: f64,
    /// Whether the ratio was taken against ground truth or the seed frame.
    pub against_ground_truth: bool,
    pub l1: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct RolloutTrace {
    pub model: String,
    /// The seed frame followed by `K` predictions.
    pub frames: Vec<Image>,
    pub diagnostics: Vec<StepDiagnostics>,
}

impl RolloutTrace {
    pub fn horizon(&self) -> usize {
        self.diagnostics.len()
    }
}

/// Runs `horizon` steps from `seed_frame`. Step `k` (1-based) is seeded with
/// `seed ^ k`. `ground_truth[k-1]`, when present, is the real frame `k`.
pub fn rollout(
    predictor: &dyn FramePredictor,
    seed_frame: &Image,
    horizon: usize,
    seed: u64,
    ground_truth: &[Image],
) -> Result<RolloutTrace> {
    if horizon == 0 {
        return Err(Error::config("rollout horizon must be at least 1"));
    }
    let mut frames = vec![seed_frame.clone()];
    let mut diagnostics = Vec::with_capacity(horizon);
    for k in 1..=horizon {
        let wrap = |e: Error| Error::Rollout {
            step: k,
            source: Box::new(e),
        };
        let prev = frames.last().expect("seed frame present");
        let next = predictor.predict(prev, seed ^ k as u64).map_err(wrap)?;
        if !next.same_shape(seed_frame) {
            return Err(wrap(Error::shape(format!(
                "prediction {:?} differs from seed frame {:?}",
                next.dims(),
                seed_frame.dims()
            ))));
        }
        if !next.is_finite() {
            return Err(wrap(Error::Data("prediction contains non-finite values".into())));
        }
        let truth = ground_truth.get(k - 1);
        let reference = truth.unwrap_or(seed_frame);
        let (l1, s) = match truth {
            Some(t) => (
                Some(pixel_metrics(&next, t).map_err(wrap)?.l1),
                Some(ssim(&next, t).map_err(wrap)?),
            ),
            None => (None, None),
        };
        diagnostics.push(StepDiagnostics {
            step: k,
            hf_energy_ratio: hf_energy_ratio(&next, reference).map_err(wrap)?,
            std: next.std(),
            against_ground_truth: truth.is_some(),
            l1,
            ssim: s,
        });
        frames.push(next);
    }
    Ok(RolloutTrace {
        model: predictor.name().to_string(),
        frames,
        diagnostics,
    })
}

/// One row per trace, one column per frame, separated by `gap` white pixels.
pub fn frame_strip(traces: &[RolloutTrace], gap: usize) -> Result<Image> {
    let Some(first) = traces.first().and_then(|t| t.frames.first()) else {
        return Err(Error::config("no frames to lay out"));
    };
    let (c, h, w) = first.dims();
    let cols = traces.iter().map(|t| t.frames.len()).max().unwrap_or(0);
    let rows = traces.len();
    let mut out = Image::filled(c, rows * h + (rows - 1) * gap, cols * w + (cols - 1) * gap, 1.0);
    for (r, trace) in traces.iter().enumerate() {
        for (k, frame) in trace.frames.iter().enumerate() {
            if frame.dims() != (c, h, w) {
                return Err(Error::shape("frames in a strip must share one shape"));
            }
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out.set(ch, r * (h + gap) + y, k * (w + gap) + x, frame.get(ch, y, x));
                    }
                }
            }
        }
    }
    Ok(out)
}

pub fn diagnostics_table(traces: &[RolloutTrace]) -> String {
    let mut s = String::from("model        step  hf_ratio    std       l1        ssim\n");
    let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"));
    for t in traces {
        for d in &t.diagnostics {
            let _ = writeln!(
                s,
                "{:<12} {:>4}  {:<10.4}  {:<8.4}  {:<8}  {}",
                t.model,
                d.step,
                d.hf_energy_ratio,
                d.std,
                opt(d.l1),
                opt(d.ssim)
            );
        }
    }
    s
}
