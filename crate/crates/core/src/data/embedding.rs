use std::io::{Read, Write};
use std::path::Path;

use candle_core::{Device, Tensor};
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::name_rng;

pub const EMBEDDING_CHANNELS: usize = 64;

const MAGIC: &[u8; 4] = b"JEMB";
const VERSION: u32 = 1;

/// A `grid_h × grid_w` field of 64-channel semantic vectors, stored
/// position-major with channels innermost.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingField {
    grid_h: usize,
    grid_w: usize,
    data: Vec<f32>,
}

impl EmbeddingField {
    pub fn new(grid_h: usize, grid_w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid_h * grid_w * EMBEDDING_CHANNELS {
            return Err(Error::Data(format!(
                "embedding buffer of {} values does not match {grid_h}x{grid_w}x{EMBEDDING_CHANNELS}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("embedding contains non-finite values".into()));
        }
        Ok(Self { grid_h, grid_w, data })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.grid_h, self.grid_w)
    }

    pub fn tokens(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn token(&self, i: usize) -> &[f32] {
        &self.data[i * EMBEDDING_CHANNELS..(i + 1) * EMBEDDING_CHANNELS]
    }

    /// `N × 64` tensor.
    pub fn to_tensor(&self, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(
            &self.data,
            (self.tokens(), EMBEDDING_CHANNELS),
            device,
        )?)
    }

    /// Layout: `b"JEMB"`, then little-endian `u32` version, grid height,
    /// grid width and channel count, then `f32` values.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [
            VERSION,
            self.grid_h as u32,
            self.grid_w as u32,
            EMBEDDING_CHANNELS as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut header = [0u8; 20];
        r.read_exact(&mut header)
            .map_err(|e| Error::Data(format!("embedding header: {e}")))?;
        if &header[0..4] != MAGIC {
            return Err(Error::Data("bad embedding magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let (version, gh, gw, ch) = (word(0), word(1) as usize, word(2) as usize, word(3) as usize);
        if version != VERSION {
            return Err(Error::Data(format!("unsupported embedding version {version}")));
        }
        if ch != EMBEDDING_CHANNELS {
            return Err(Error::Data(format!(
                "embedding has {ch} channels, expected {EMBEDDING_CHANNELS}"
            )));
        }
        let mut bytes = vec![0u8; gh * gw * ch * 4];
        r.read_exact(&mut bytes)
            .map_err(|e| Error::Data(format!("embedding payload: {e}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        EmbeddingField::new(gh, gw, data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(std::io::BufWriter::new(f))
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(std::io::BufReader::new(f))
    }
}

const PROXY_FEATURES: usize = 9;

/// Stand-in for precomputed foundation-model embeddings: a fixed random
/// projection of per-patch colour and gradient statistics squashed by
/// `tanh`. Deterministic, and smooth in the frame contents.
pub fn foundation_proxy(frame: &Image, patch: usize) -> Result<EmbeddingField> {
    let (c, h, w) = frame.dims();
    if c != 3 || h % patch != 0 || w % patch != 0 {
        return Err(Error::shape(format!(
            "{c}x{h}x{w} frame cannot be split into {patch}px patches"
        )));
    }
    let mut rng = name_rng(0x5eed, "foundation_proxy");
    let proj: Vec<f32> = (0..EMBEDDING_CHANNELS * PROXY_FEATURES)
        .map(|_| {
            let z: f32 = StandardNormal.sample(&mut rng);
            z / (PROXY_FEATURES as f32).sqrt()
        })
        .collect();
    let gray = frame.grayscale();
    let (gh, gw) = (h / patch, w / patch);
    let mut data = Vec::with_capacity(gh * gw * EMBEDDING_CHANNELS);
    let n = (patch * patch) as f32;
    for py in 0..gh {
        for px in 0..gw {
            let mut feats = [0f32; PROXY_FEATURES];
            for ch in 0..3 {
                let (mut s, mut s2) = (0f32, 0f32);
                for y in 0..patch {
                    for x in 0..patch {
                        let v = frame.get(ch, py * patch + y, px * patch + x);
                        s += v;
                        s2 += v * v;
                    }
                }
                let mean = s / n;
                feats[ch] = 4.0 * (mean - 0.5);
                feats[3 + ch] = 8.0 * (s2 / n - mean * mean).max(0.0).sqrt();
            }
            let (mut gx, mut gy) = (0f32, 0f32);
            for y in 0..patch {
                for x in 0..patch {
                    let (yy, xx) = (py * patch + y, px * patch + x);
                    if xx + 1 < w {
                        gx += (gray.get(yy, xx + 1) - gray.get(yy, xx)).abs() as f32;
                    }
                    if yy + 1 < h {
                        gy += (gray.get(yy + 1, xx) - gray.get(yy, xx)).abs() as f32;
                    }
                }
            }
            feats[6] = 4.0 * gx / n;
            feats[7] = 4.0 * gy / n;
            feats[8] = 1.0;
            for k in 0..EMBEDDING_CHANNELS {
                let row = &proj[k * PROXY_FEATURES..(k + 1) * PROXY_FEATURES];
                let z: f32 = row.iter().zip(&feats).map(|(a, b)| a * b).sum();
                data.push(z.tanh());
            }
        }
    }
    EmbeddingField::new(gh, gw, data)
}
