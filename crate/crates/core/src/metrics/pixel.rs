use crate::error::{Error, Result};
use crate::image::Image;

pub const PSNR_CAP_DB: f64 = 120.0;
const MSE_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMetrics {
    pub l1: f64,
    pub mse: f64,
    pub psnr: f64,
}

/// PSNR in dB for unit data range, capped for identical inputs.
pub fn psnr_from_mse(mse: f64) -> f64 {
    (10.0 * (1.0 / mse.max(MSE_FLOOR)).log10()).min(PSNR_CAP_DB)
}

pub fn pixel_metrics(pred: &Image, target: &Image) -> Result<PixelMetrics> {
    if !pred.same_shape(target) {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let n = pred.data().len() as f64;
    let (mut abs, mut sq) = (0.0f64, 0.0f64);
    for (&a, &b) in pred.data().iter().zip(target.data()) {
        let d = a as f64 - b as f64;
        abs += d.abs();
        sq += d * d;
    }
    let mse = sq / n;
    Ok(PixelMetrics {
        l1: abs / n,
        mse,
        psnr: psnr_from_mse(mse),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn identity_hits_the_cap() {
        let im = Image::from_fn(3, 8, 8, |c, y, x| ((c + y + x) % 5) as f32 / 5.0);
        let m = pixel_metrics(&im, &im).unwrap();
        assert_eq!((m.l1, m.mse, m.psnr), (0.0, 0.0, PSNR_CAP_DB));
    }

    #[test]
    fn constant_offset() {
        // offsets stored in f32, so compare against the exact f32 difference
        let t = Image::filled(3, 4, 4, 0.25);
        let p = Image::filled(3, 4, 4, 0.35);
        let d = 0.35f32 as f64 - 0.25f32 as f64;
        let m = pixel_metrics(&p, &t).unwrap();
        assert!((m.l1 - d).abs() < 1e-15);
        assert!((m.mse - d * d).abs() < 1e-15);
        assert!((m.l1 - 0.1).abs() < 1e-7 && (m.mse - 0.01).abs() < 1e-7);
        assert!((m.psnr - 20.0).abs() < 1e-5);
    }

    #[test]
    fn half_plus_half_minus() {
        let t = Image::filled(1, 4, 4, 0.5);
        let p = Image::from_fn(1, 4, 4, |_, y, _| if y < 2 { 0.6 } else { 0.4 });
        let m = pixel_metrics(&p, &t).unwrap();
        assert!((m.l1 - 0.1).abs() < 1e-7 && (m.mse - 0.01).abs() < 1e-7);
    }

    #[test]
    fn shape_mismatch() {
        assert!(pixel_metrics(&Image::zeros(3, 4, 4), &Image::zeros(3, 4, 8)).is_err());
    }

    proptest! {
        #[test]
        fn l1_squared_bounded_by_mse(a in proptest::collection::vec(0f32..1.0, 48), b in proptest::collection::vec(0f32..1.0, 48)) {
            let p = Image::new(3, 4, 4, a).unwrap();
            let t = Image::new(3, 4, 4, b).unwrap();
            let m = pixel_metrics(&p, &t).unwrap();
            prop_assert!(m.l1 * m.l1 <= m.mse + 1e-12);
            prop_assert!(m.l1 >= 0.0 && m.mse >= 0.0);
        }
    }
}
