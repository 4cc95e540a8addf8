use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Multi-block masking parameters (one context block, one target block).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Fraction of patches visible to the context encoder.
    pub encoder_scale: (f64, f64),
    /// Fraction of patches the loss is evaluated on.
    pub predictor_scale: (f64, f64),
    /// Block height / width.
    pub aspect_ratio: (f64, f64),
    pub min_keep: usize,
    pub allow_overlap: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            encoder_scale: (0.7, 1.0),
            predictor_scale: (0.2, 0.5),
            aspect_ratio: (0.75, 1.5),
            min_keep: 6,
            allow_overlap: true,
        }
    }
}

impl MaskConfig {
    /// Admissible patch counts for a scale interval on `n` patches: lower
    /// bound floored, upper bound ceiled and capped at `n`.
    pub fn count_bounds(scale: (f64, f64), n: usize) -> (usize, usize) {
        let lo = (scale.0 * n as f64).floor() as usize;
        let hi = ((scale.1 * n as f64).ceil() as usize).min(n);
        (lo, hi)
    }
}

/// An axis-aligned rectangle of patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Block {
    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn aspect(&self) -> f64 {
        self.height as f64 / self.width as f64
    }

    fn indices(&self, grid: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.area());
        for y in self.top..self.top + self.height {
            for x in self.left..self.left + self.width {
                out.push(y * grid + x);
            }
        }
        out
    }
}

/// Context (encoder-visible) and target (loss) patch sets, both sorted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub grid: usize,
    pub context: Vec<usize>,
    pub target: Vec<usize>,
    pub context_block: Block,
    pub target_block: Block,
}

impl MaskSpec {
    /// Everything visible and everything scored; used at inference.
    pub fn full(num_patches: usize) -> Result<Self> {
        let grid = perfect_sqrt(num_patches)?;
        let all = Block {
            top: 0,
            left: 0,
            height: grid,
            width: grid,
        };
        Ok(Self {
            grid,
            context: (0..num_patches).collect(),
            target: (0..num_patches).collect(),
            context_block: all,
            target_block: all,
        })
    }

    pub fn num_patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn is_context(&self, i: usize) -> bool {
        self.context.binary_search(&i).is_ok()
    }
}

fn perfect_sqrt(n: usize) -> Result<usize> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(Error::config(format!("{n} patches do not form a square grid")));
    }
    Ok(g)
}

fn feasible_shapes(grid: usize, counts: (usize, usize), aspect: (f64, f64)) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for h in 1..=grid {
        for w in 1..=grid {
            let a = h as f64 / w as f64;
            let area = h * w;
            if area >= counts.0 && area <= counts.1 && a >= aspect.0 && a <= aspect.1 {
                out.push((h, w));
            }
        }
    }
    out
}

fn sample_shape<R: Rng + ?Sized>(
    rng: &mut R,
    grid: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
    min_area: usize,
) -> Result<(usize, usize)> {
    let n = grid * grid;
    // sample inside the strict ratio interval when it holds an integer count
    let strict = (
        ((scale.0 * n as f64).ceil() as usize).max(min_area),
        ((scale.1 * n as f64).floor() as usize).min(n),
    );
    let (lo, hi) = MaskConfig::count_bounds(scale, n);
    let counts = if strict.0 <= strict.1 {
        strict
    } else {
        (lo.max(min_area), hi)
    };
    let shapes = feasible_shapes(grid, counts, aspect);
    if shapes.is_empty() {
        return Err(Error::config(format!(
            "no block on a {grid}x{grid} grid has {}..={} patches with aspect in [{}, {}]",
            counts.0, counts.1, aspect.0, aspect.1
        )));
    }
    let (log_lo, log_hi) = (aspect.0.ln(), aspect.1.ln());
    for _ in 0..64 {
        let s = rng.random_range(scale.0..=scale.1);
        let ar = rng.random_range(log_lo..=log_hi).exp();
        let target = s * n as f64;
        let h = ((target * ar).sqrt().round() as usize).clamp(1, grid);
        let w = ((target / ar).sqrt().round() as usize).clamp(1, grid);
        if shapes.contains(&(h, w)) {
            return Ok((h, w));
        }
    }
    Ok(shapes[rng.random_range(0..shapes.len())])
}

fn sample_block<R: Rng + ?Sized>(
    rng: &mut R,
    grid: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
    min_area: usize,
) -> Result<Block> {
    let (height, width) = sample_shape(rng, grid, scale, aspect, min_area)?;
    Ok(Block {
        top: rng.random_range(0..=grid - height),
        left: rng.random_range(0..=grid - width),
        height,
        width,
    })
}

/// A block of a sampled shape placed uniformly among positions that miss
/// `avoid`, or `None` when no drawn shape fits.
fn sample_disjoint_block<R: Rng + ?Sized>(
    rng: &mut R,
    grid: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
    min_area: usize,
    avoid: &Block,
) -> Result<Option<Block>> {
    let overlaps = |b: &Block| {
        b.top < avoid.top + avoid.height
            && avoid.top < b.top + b.height
            && b.left < avoid.left + avoid.width
            && avoid.left < b.left + b.width
    };
    for _ in 0..16 {
        let (height, width) = sample_shape(rng, grid, scale, aspect, min_area)?;
        let mut spots = Vec::new();
        for top in 0..=grid - height {
            for left in 0..=grid - width {
                let b = Block {
                    top,
                    left,
                    height,
                    width,
                };
                if !overlaps(&b) {
                    spots.push(b);
                }
            }
        }
        if !spots.is_empty() {
            return Ok(Some(spots[rng.random_range(0..spots.len())]));
        }
    }
    Ok(None)
}

/// Draws one context block and one target block on the `√N × √N` patch grid.
/// Block shapes are drawn as in I-JEPA (uniform scale, log-uniform aspect)
/// and resampled until the integer rectangle respects every bound.
pub fn sample_mask<R: Rng + ?Sized>(rng: &mut R, num_patches: usize, cfg: &MaskConfig) -> Result<MaskSpec> {
    if num_patches < 16 {
        return Err(Error::config(format!(
            "masking needs at least 16 patches, got {num_patches}"
        )));
    }
    let grid = perfect_sqrt(num_patches)?;
    let (target_block, context_block) = if cfg.allow_overlap {
        let t = sample_block(rng, grid, cfg.predictor_scale, cfg.aspect_ratio, 1)?;
        let c = sample_block(rng, grid, cfg.encoder_scale, cfg.aspect_ratio, cfg.min_keep)?;
        (t, c)
    } else {
        let mut found = None;
        for _ in 0..64 {
            let t = sample_block(rng, grid, cfg.predictor_scale, cfg.aspect_ratio, 1)?;
            let c = sample_disjoint_block(rng, grid, cfg.encoder_scale, cfg.aspect_ratio, cfg.min_keep, &t)?;
            if let Some(c) = c {
                found = Some((t, c));
                break;
            }
        }
        found.ok_or_else(|| Error::config("cannot place disjoint context and target blocks"))?
    };
    let target = target_block.indices(grid);
    let context = context_block.indices(grid);
    Ok(MaskSpec {
        grid,
        context,
        target,
        context_block,
        target_block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn count_bounds_at_256() {
        let cfg = MaskConfig::default();
        assert_eq!(MaskConfig::count_bounds(cfg.encoder_scale, 256), (179, 256));
        assert_eq!(MaskConfig::count_bounds(cfg.predictor_scale, 256), (51, 128));
    }

    #[test]
    fn masks_are_contiguous_rectangles() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let m = sample_mask(&mut rng, 64, &MaskConfig::default()).unwrap();
            for (blk, idx) in [(m.context_block, &m.context), (m.target_block, &m.target)] {
                assert_eq!(idx.len(), blk.area());
                for &i in idx.iter() {
                    let (y, x) = (i / 8, i % 8);
                    assert!(y >= blk.top && y < blk.top + blk.height);
                    assert!(x >= blk.left && x < blk.left + blk.width);
                }
                assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }
    }

    #[test]
    fn rejects_bad_patch_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(&mut rng, 9, &MaskConfig::default()).is_err());
        assert!(sample_mask(&mut rng, 20, &MaskConfig::default()).is_err());
        let impossible = MaskConfig {
            aspect_ratio: (3.0, 4.0),
            ..MaskConfig::default()
        };
        assert!(matches!(sample_mask(&mut rng, 16, &impossible), Err(Error::Config(_))));
    }

    #[test]
    fn no_overlap_mode_separates_sets() {
        let cfg = MaskConfig {
            encoder_scale: (0.15, 0.25),
            predictor_scale: (0.1, 0.2),
            allow_overlap: false,
            ..MaskConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let m = sample_mask(&mut rng, 256, &cfg).unwrap();
            assert!(m.context.iter().all(|i| !m.target.contains(i)));
        }
    }

    #[test]
    fn full_mask_covers_everything() {
        let m = MaskSpec::full(16).unwrap();
        assert_eq!(m.context.len(), 16);
        assert!(m.is_context(15));
    }
}
