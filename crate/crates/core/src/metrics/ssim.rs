use crate::error::{Error, Result};
use crate::image::{gaussian_kernel_1d, Image, Plane};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

/// Separable Gaussian filter over the valid region only.
fn filter_valid(p: &Plane, k: &[f64]) -> Plane {
    let w = k.len();
    let oh = p.height + 1 - w;
    let ow = p.width + 1 - w;
    let horiz = Plane::from_fn(p.height, ow, |y, x| {
        k.iter().enumerate().map(|(i, t)| t * p.get(y, x + i)).sum()
    });
    Plane::from_fn(oh, ow, |y, x| {
        k.iter().enumerate().map(|(i, t)| t * horiz.get(y + i, x)).sum()
    })
}

fn product(a: &Plane, b: &Plane) -> Plane {
    Plane {
        height: a.height,
        width: a.width,
        data: a.data.iter().zip(&b.data).map(|(x, y)| x * y).collect(),
    }
}

/// Mean SSIM between two single-channel planes (unit data range, Gaussian
/// window, population statistics, valid windows only).
pub fn ssim_planes(a: &Plane, b: &Plane) -> Result<f64> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::shape(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    if a.height < SSIM_WINDOW || a.width < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "{}x{} image is smaller than the {SSIM_WINDOW}px SSIM window",
            a.height, a.width
        )));
    }
    let k = gaussian_kernel_1d(SSIM_SIGMA, SSIM_WINDOW / 2);
    let mu_a = filter_valid(a, &k);
    let mu_b = filter_valid(b, &k);
    let aa = filter_valid(&product(a, a), &k);
    let bb = filter_valid(&product(b, b), &k);
    let ab = filter_valid(&product(a, b), &k);
    let n = mu_a.data.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a.data[i], mu_b.data[i]);
        let va = aa.data[i] - ma * ma;
        let vb = bb.data[i] - mb * mb;
        let cov = ab.data[i] - ma * mb;
        total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    Ok(total / n as f64)
}

/// SSIM on the channel-mean grayscale of both images.
pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    ssim_planes(&pred.grayscale(), &target.grayscale())
}

/// 3×3 Sobel gradient magnitude with edge-mirrored borders.
pub fn sobel_magnitude(p: &Plane) -> Plane {
    Plane::from_fn(p.height, p.width, |y, x| {
        let (y, x) = (y as isize, x as isize);
        let v = |dy: isize, dx: isize| p.get_reflect(y + dy, x + dx);
        let gx = (v(-1, 1) + 2.0 * v(0, 1) + v(1, 1)) - (v(-1, -1) + 2.0 * v(0, -1) + v(1, -1));
        let gy = (v(1, -1) + 2.0 * v(1, 0) + v(1, 1)) - (v(-1, -1) + 2.0 * v(-1, 0) + v(-1, 1));
        (gx * gx + gy * gy).sqrt()
    })
}

/// SSIM between Sobel gradient-magnitude maps of the grayscale inputs.
pub fn gssim(pred: &Image, target: &Image) -> Result<f64> {
    if !pred.same_shape(target) {
        return Err(Error::shape(format!(
            "prediction {:?} vs target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    ssim_planes(
        &sobel_magnitude(&pred.grayscale()),
        &sobel_magnitude(&target.grayscale()),
    )
}
