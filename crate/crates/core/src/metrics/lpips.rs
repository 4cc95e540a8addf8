use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::name_rng;

/// One `C×H×W` activation map.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// Source of multi-layer activations for the perceptual distance.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    /// Whether scores are comparable with published perceptual distances.
    fn comparable(&self) -> bool;
    fn features(&self, image: &Image) -> Result<Vec<FeatureMap>>;
}

/// Learned-perceptual distance: channel-normalised activations, squared
/// difference summed over channels, averaged over space and summed over
/// layers (unit layer weights).
pub fn lpips(pred: &Image, target: &Image, extractor: Option<&dyn FeatureExtractor>) -> Result<f64> {
    let extractor = extractor.ok_or_else(|| Error::Unavailable("LPIPS feature extractor".into()))?;
    if !pred.same_shape(target) {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let fa = extractor.features(pred)?;
    let fb = extractor.features(target)?;
    let mut total = 0.0;
    for (a, b) in fa.iter().zip(&fb) {
        let hw = a.height * a.width;
        let mut layer = 0.0;
        for i in 0..hw {
            let norm = |m: &FeatureMap| (0..m.channels).map(|c| m.data[c * hw + i].powi(2)).sum::<f64>().sqrt() + 1e-10;
            let (na, nb) = (norm(a), norm(b));
            layer += (0..a.channels)
                .map(|c| (a.data[c * hw + i] / na - b.data[c * hw + i] / nb).powi(2))
                .sum::<f64>();
        }
        total += layer / hw as f64;
    }
    Ok(total)
}

/// Fixed random 3×3 stride-2 convolution stack with ReLU. Deterministic for
/// a given seed but untrained, so its scores are only meaningful relative to
/// each other.
#[derive(Clone, Debug)]
pub struct RandomConvExtractor {
    layers: Vec<(usize, usize, Vec<f64>)>,
}

impl RandomConvExtractor {
    pub fn new(seed: u64) -> Self {
        let widths = [3usize, 16, 32, 32];
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let mut rng = name_rng(seed, &format!("lpips.conv{i}"));
                let std = (2.0 / (w[0] * 9) as f64).sqrt();
                let k = (0..w[1] * w[0] * 9)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        z * std
                    })
                    .collect();
                (w[0], w[1], k)
            })
            .collect();
        Self { layers }
    }
}

impl Default for RandomConvExtractor {
    fn default() -> Self {
        Self::new(0x1915)
    }
}

fn conv_relu(x: &FeatureMap, out_c: usize, k: &[f64]) -> FeatureMap {
    let (h, w) = (x.height.div_ceil(2), x.width.div_ceil(2));
    let mut data = vec![0.0; out_c * h * w];
    let hw_in = x.height * x.width;
    for o in 0..out_c {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for c in 0..x.channels {
                    for ky in 0..3 {
                        let iy = (2 * y + ky) as isize - 1;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (2 * xx + kx) as isize - 1;
                            if ix < 0 || ix >= x.width as isize {
                                continue;
                            }
                            acc += k[((o * x.channels + c) * 3 + ky) * 3 + kx]
                                * x.data[c * hw_in + iy as usize * x.width + ix as usize];
                        }
                    }
                }
                data[(o * h + y) * w + xx] = acc.max(0.0);
            }
        }
    }
    FeatureMap {
        channels: out_c,
        height: h,
        width: w,
        data,
    }
}

impl FeatureExtractor for RandomConvExtractor {
    fn name(&self) -> &str {
        "random-conv (non-comparable)"
    }

    fn comparable(&self) -> bool {
        false
    }

    fn features(&self, image: &Image) -> Result<Vec<FeatureMap>> {
        if image.channels() != 3 {
            return Err(Error::shape(format!("expected RGB, got {} channels", image.channels())));
        }
        let mut x = FeatureMap {
            channels: 3,
            height: image.height(),
            width: image.width(),
            data: image.data().iter().map(|&v| 2.0 * v as f64 - 1.0).collect(),
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (cin, cout, k) in &self.layers {
            debug_assert_eq!(*cin, x.channels);
            x = conv_relu(&x, *cout, k);
            out.push(x.clone());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (Image, Image) {
        let a = Image::from_fn(3, 16, 16, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f32 / 7.0);
        let b = Image::from_fn(3, 16, 16, |c, y, x| ((2 * c + y + x) % 5) as f32 / 5.0);
        (a, b)
    }

    #[test]
    fn identity_symmetry_positivity() {
        let ex = RandomConvExtractor::default();
        let (a, b) = pair();
        assert_eq!(lpips(&a, &a, Some(&ex)).unwrap(), 0.0);
        let ab = lpips(&a, &b, Some(&ex)).unwrap();
        let ba = lpips(&b, &a, Some(&ex)).unwrap();
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
    }

    #[test]
    fn missing_extractor_is_unavailable() {
        let (a, b) = pair();
        assert!(matches!(lpips(&a, &b, None), Err(Error::Unavailable(_))));
    }

    #[test]
    fn layer_shapes() {
        let ex = RandomConvExtractor::default();
        let f = ex.features(&Image::zeros(3, 16, 16)).unwrap();
        let dims: Vec<_> = f.iter().map(|m| (m.channels, m.height, m.width)).collect();
        assert_eq!(dims, vec![(16, 8, 8), (32, 4, 4), (32, 2, 2)]);
        assert!(!ex.comparable());
    }
}
