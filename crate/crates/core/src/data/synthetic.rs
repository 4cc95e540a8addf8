use chrono::NaiveDate;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_frame_size, foundation_proxy, SequenceSample, EMBEDDING_PATCH};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub rois: usize,
    /// Frames per region; each region yields `steps - 1` pairs.
    pub steps: usize,
    pub size: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            rois: 4,
            steps: 8,
            size: 64,
            seed: 0,
        }
    }
}

struct Grating {
    freq: (f64, f64),
    phase: f64,
    amp: f64,
    tint: [f64; 3],
}

/// Scene on the unit torus: Voronoi land-cover cells with flat colours and
/// sharp borders, band-limited texture that moves with the scene, a slow
/// rotation+translation drift and a per-cell seasonal gain.
struct Scene {
    sites: Vec<(f64, f64)>,
    colors: Vec<[f64; 3]>,
    season_phase: Vec<f64>,
    gratings: Vec<Grating>,
    velocity: (f64, f64),
    spin: f64,
}

impl Scene {
    fn sample(rng: &mut ChaCha8Rng, size: usize) -> Self {
        let n_sites = rng.random_range(6..=10);
        let sites = (0..n_sites)
            .map(|_| (rng.random::<f64>(), rng.random::<f64>()))
            .collect();
        let colors = (0..n_sites)
            .map(|_| {
                [
                    rng.random_range(0.1..0.85),
                    rng.random_range(0.1..0.85),
                    rng.random_range(0.1..0.85),
                ]
            })
            .collect();
        let season_phase = (0..n_sites)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let max_freq = (size / 6).max(2) as i32;
        let min_freq = (size / 16).max(1) as i32;
        let gratings = (0..3)
            .map(|_| {
                let fx = rng.random_range(min_freq..=max_freq) as f64 * if rng.random::<bool>() { 1.0 } else { -1.0 };
                let fy = rng.random_range(0..=max_freq) as f64;
                Grating {
                    freq: (fx, fy),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: rng.random_range(0.03..0.07),
                    tint: [
                        rng.random_range(0.5..1.0),
                        rng.random_range(0.5..1.0),
                        rng.random_range(0.5..1.0),
                    ],
                }
            })
            .collect();
        let speed = rng.random_range(2.0..4.0) / size as f64;
        let heading = rng.random_range(0.0..std::f64::consts::TAU);
        Scene {
            sites,
            colors,
            season_phase,
            gratings,
            velocity: (speed * heading.cos(), speed * heading.sin()),
            spin: rng.random_range(-0.02..0.02),
        }
    }

    fn nearest_site(&self, q: (f64, f64)) -> usize {
        let wrap = |d: f64| {
            let d = d.abs();
            d.min(1.0 - d)
        };
        let mut best = (f64::INFINITY, 0);
        for (i, s) in self.sites.iter().enumerate() {
            let dx = wrap(q.0 - s.0);
            let dy = wrap(q.1 - s.1);
            let d = dx * dx + dy * dy;
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    fn render(&self, step: usize, size: usize) -> Image {
        let k = step as f64;
        let (sin, cos) = (self.spin * k).sin_cos();
        let mut out = Image::zeros(3, size, size);
        for y in 0..size {
            for x in 0..size {
                let px = (x as f64 + 0.5) / size as f64 - 0.5;
                let py = (y as f64 + 0.5) / size as f64 - 0.5;
                let qx = (cos * px - sin * py + 0.5 + k * self.velocity.0).rem_euclid(1.0);
                let qy = (sin * px + cos * py + 0.5 + k * self.velocity.1).rem_euclid(1.0);
                let region = self.nearest_site((qx, qy));
                let gain = 1.0 + 0.08 * (std::f64::consts::FRAC_PI_2 * k + self.season_phase[region]).sin();
                let mut rgb = self.colors[region].map(|c| c * gain);
                for g in &self.gratings {
                    let arg = std::f64::consts::TAU * (g.freq.0 * qx + g.freq.1 * qy) + g.phase;
                    let t = g.amp * arg.sin();
                    for (c, tint) in rgb.iter_mut().zip(g.tint) {
                        *c += t * tint;
                    }
                }
                for (c, v) in rgb.iter().enumerate() {
                    out.set(c, y, x, v.clamp(0.0, 1.0) as f32);
                }
            }
        }
        out
    }
}

/// `num_steps` frames of one procedurally drifting scene, returned as the
/// `num_steps - 1` consecutive pairs. Each pair carries a proxy semantic
/// embedding of its second frame. Annual cadence starting 2017-06-01.
pub fn generate_synthetic_sequence(seed: u64, num_steps: usize, size: usize) -> Result<Vec<SequenceSample>> {
    if num_steps < 2 {
        return Err(Error::config(format!(
            "a sequence needs at least 2 steps, got {num_steps}"
        )));
    }
    check_frame_size(size, size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scene = Scene::sample(&mut rng, size);
    let frames: Vec<Image> = (0..num_steps).map(|k| scene.render(k, size)).collect();
    let date = |k: usize| NaiveDate::from_ymd_opt(2017 + k as i32, 6, 1).expect("valid date");
    let roi = format!("synthetic-{seed}");
    frames
        .windows(2)
        .enumerate()
        .map(|(k, w)| {
            let emb = foundation_proxy(&w[1], EMBEDDING_PATCH)?;
            SequenceSample::new(
                w[0].clone(),
                w[1].clone(),
                Some(emb),
                roi.clone(),
                (date(k), date(k + 1)),
            )
        })
        .collect()
}
