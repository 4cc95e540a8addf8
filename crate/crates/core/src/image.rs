//! Planar RGB frames and single-channel planes.
//!
//! Frames are stored channel-major (`C×H×W`) as `f32`, matching the tensor
//! layout fed to the networks. Metric code works on [`Plane`]s in `f64`.

use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

/// A `C×H×W` frame. RGB frames coming out of the data pipeline and the
/// sampler have every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!(
                "buffer of {} values cannot hold {channels}x{height}x{width}",
                data.len()
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn min(&self) -> f32 {
        self.data.iter().copied().fold(f32::INFINITY, f32::min)
    }

    pub fn max(&self) -> f32 {
        self.data.iter().copied().fold(f32::NEG_INFINITY, f32::max)
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp01(mut self) -> Self {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
        self
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.dims() == other.dims()
    }

    /// Population standard deviation over every value.
    pub fn std(&self) -> f64 {
        let n = self.data.len() as f64;
        let mean = self.data.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.data.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        var.sqrt()
    }

    /// Channel-mean grayscale plane.
    pub fn grayscale(&self) -> Plane {
        let hw = self.height * self.width;
        let mut out = vec![0.0f64; hw];
        for c in 0..self.channels {
            for (o, &v) in out.iter_mut().zip(&self.data[c * hw..(c + 1) * hw]) {
                *o += v as f64;
            }
        }
        let inv = 1.0 / self.channels as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Plane {
            height: self.height,
            width: self.width,
            data: out,
        }
    }

    pub fn channel_plane(&self, c: usize) -> Plane {
        let hw = self.height * self.width;
        Plane {
            height: self.height,
            width: self.width,
            data: self.data[c * hw..(c + 1) * hw].iter().map(|&v| v as f64).collect(),
        }
    }

    pub fn from_planes(planes: &[Plane]) -> Result<Self> {
        let first = planes.first().ok_or_else(|| Error::shape("no planes given"))?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(planes.len() * h * w);
        for p in planes {
            if p.height != h || p.width != w {
                return Err(Error::shape("planes differ in size"));
            }
            data.extend(p.data.iter().map(|&v| v as f32));
        }
        Image::new(planes.len(), h, w, data)
    }

    /// Box-filter downsampling by an integer factor in each direction.
    pub fn area_downsample(&self, height: usize, width: usize) -> Result<Image> {
        if height == 0 || width == 0 || !self.height.is_multiple_of(height) || !self.width.is_multiple_of(width) {
            return Err(Error::shape(format!(
                "{}x{} cannot be area-downsampled to {height}x{width}",
                self.height, self.width
            )));
        }
        let fy = self.height / height;
        let fx = self.width / width;
        let inv = 1.0 / (fy * fx) as f64;
        Ok(Image::from_fn(self.channels, height, width, |c, y, x| {
            let mut acc = 0.0f64;
            for dy in 0..fy {
                for dx in 0..fx {
                    acc += self.get(c, y * fy + dy, x * fx + dx) as f64;
                }
            }
            (acc * inv) as f32
        }))
    }

    /// Separable Gaussian blur with edge-reflecting borders.
    pub fn gaussian_blur(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let planes: Vec<Plane> = (0..self.channels)
            .map(|c| self.channel_plane(c).gaussian_blur(sigma))
            .collect();
        Image::from_planes(&planes).expect("planes share the source shape")
    }

    /// Circular shift by `(dy, dx)` pixels.
    pub fn roll(&self, dy: isize, dx: isize) -> Image {
        let (h, w) = (self.height as isize, self.width as isize);
        Image::from_fn(self.channels, self.height, self.width, |c, y, x| {
            let sy = (y as isize - dy).rem_euclid(h) as usize;
            let sx = (x as isize - dx).rem_euclid(w) as usize;
            self.get(c, sy, sx)
        })
    }

    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.channels, self.height, self.width),
            device,
        )?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Image> {
        let (c, h, w) = t.dims3()?;
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Image::new(c, h, w, data)
    }

    /// Stacks frames into a `B×C×H×W` tensor.
    pub fn stack(images: &[&Image], device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| Error::shape("cannot stack an empty batch"))?;
        let mut data = Vec::with_capacity(images.len() * first.data.len());
        for im in images {
            if !im.same_shape(first) {
                return Err(Error::shape("frames in a batch differ in shape"));
            }
            data.extend_from_slice(&im.data);
        }
        let (c, h, w) = first.dims();
        Ok(Tensor::from_vec(data, (images.len(), c, h, w), device)?)
    }

    pub fn unstack(t: &Tensor) -> Result<Vec<Image>> {
        let (b, _, _, _) = t.dims4()?;
        (0..b).map(|i| Image::from_tensor(&t.get(i)?)).collect()
    }

    /// Reads an 8- or 16-bit PNG, normalising to `[0, 1]` RGB.
    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let rgb = img.to_rgb32f();
        let (w, h) = rgb.dimensions();
        let (w, h) = (w as usize, h as usize);
        let raw = rgb.into_raw();
        Ok(Image::from_fn(3, h, w, |c, y, x| {
            raw[(y * w + x) * 3 + c].clamp(0.0, 1.0)
        }))
    }

    /// Writes a 16-bit RGB PNG. Values are clamped to `[0, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.channels != 3 {
            return Err(Error::shape("only RGB frames can be written as PNG"));
        }
        let (h, w) = (self.height, self.width);
        let mut buf = image::ImageBuffer::<image::Rgb<u16>, Vec<u16>>::new(w as u32, h as u32);
        for (x, y, px) in buf.enumerate_pixels_mut() {
            let (x, y) = (x as usize, y as usize);
            for c in 0..3 {
                px.0[c] = (self.get(c, y, x).clamp(0.0, 1.0) * 65535.0).round() as u16;
            }
        }
        buf.save(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

/// A single-channel `f64` plane used by the metrics.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "buffer of {} values cannot hold {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    /// Value at a possibly out-of-range coordinate, mirrored about the edge
    /// pixels (`d c b a | a b c d | d c b a`).
    #[inline]
    pub fn get_reflect(&self, y: isize, x: isize) -> f64 {
        self.get(reflect_index(y, self.height), reflect_index(x, self.width))
    }

    pub fn gaussian_blur(&self, sigma: f64) -> Plane {
        let kernel = gaussian_kernel_1d(sigma, (4.0 * sigma).ceil() as usize);
        let r = (kernel.len() / 2) as isize;
        let horiz = Plane::from_fn(self.height, self.width, |y, x| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * self.get_reflect(y as isize, x as isize + i as isize - r))
                .sum()
        });
        Plane::from_fn(self.height, self.width, |y, x| {
            kernel
                .iter()
                .enumerate()
                .map(|(i, k)| k * horiz.get_reflect(y as isize + i as isize - r, x as isize))
                .sum()
        })
    }
}

/// Normalised Gaussian taps of length `2*radius+1`.
pub fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * n;
    let m = i.rem_euclid(period);
    if m < n {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reflect_duplicates_edge() {
        assert_eq!(reflect_index(-1, 4), 0);
        assert_eq!(reflect_index(-2, 4), 1);
        assert_eq!(reflect_index(4, 4), 3);
        assert_eq!(reflect_index(5, 4), 2);
        assert_eq!(reflect_index(2, 4), 2);
    }

    #[test]
    fn area_downsample_averages_blocks() {
        let im = Image::from_fn(1, 4, 4, |_, y, x| (y * 4 + x) as f32);
        let d = im.area_downsample(2, 2).unwrap();
        assert_eq!(d.data(), &[2.5, 4.5, 10.5, 12.5]);
        assert!(im.area_downsample(3, 3).is_err());
    }

    #[test]
    fn blur_preserves_constants() {
        let im = Image::filled(3, 9, 7, 0.25);
        let b = im.gaussian_blur(1.3);
        assert!(b.data().iter().all(|v| (v - 0.25).abs() < 1e-6));
    }

    #[test]
    fn tensor_round_trip() {
        let im = Image::from_fn(3, 2, 5, |c, y, x| (c * 10 + y * 5 + x) as f32 / 30.0);
        let t = Image::stack(&[&im, &im], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 2, 5]);
        assert_eq!(Image::unstack(&t).unwrap()[1], im);
    }

    #[test]
    fn png_round_trip_is_16_bit_accurate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let im = Image::from_fn(3, 8, 8, |c, y, x| ((c + y + x) % 7) as f32 / 6.0);
        im.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        for (a, b) in im.data().iter().zip(back.data()) {
            assert!((a - b).abs() < 1e-4);
        }
    }
}
