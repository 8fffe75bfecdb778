//! RGB rasters on a continuous `[0, 1]` scale, PSNR, cropping and the
//! seeded random streams every other module draws from.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// Planar RGB image, intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    /// Channel-major: `data[(c * height + y) * width + x]`.
    data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1, "image must be at least 1x1");
        Self {
            height,
            width,
            data: vec![value.clamp(0.0, 1.0); CHANNELS * height * width],
        }
    }

    /// Planar data; values are clipped into `[0, 1]`.
    pub fn from_planar(height: usize, width: usize, mut data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != CHANNELS * height * width {
            return Err(Error::DimensionMismatch(format!(
                "{} values for a {height}x{width} RGB image",
                data.len()
            )));
        }
        clip_slice(&mut data);
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        assert!(height >= 1 && width >= 1, "image must be at least 1x1");
        let mut data = Vec::with_capacity(CHANNELS * height * width);
        for c in 0..CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x).clamp(0.0, 1.0));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v.clamp(0.0, 1.0);
    }

    /// Applies `f` to the raw planar buffer, then clips.
    pub fn map_planar(&self, f: impl FnOnce(&mut [f64])) -> Self {
        let mut out = self.clone();
        f(&mut out.data);
        clip_slice(&mut out.data);
        out
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 || top + height > self.height || left + width > self.width {
            return Err(Error::DimensionMismatch(format!(
                "crop {height}x{width}@({top},{left}) outside {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self::from_fn(height, width, |c, y, x| self.get(c, top + y, left + x)))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| self.get(c, y, self.width - 1 - x))
    }

    pub fn flip_vertical(&self) -> Self {
        Self::from_fn(self.height, self.width, |c, y, x| self.get(c, self.height - 1 - y, x))
    }

    /// Interleaved 8-bit RGB with round-half-up quantization.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(CHANNELS * n);
        for p in 0..n {
            for c in 0..CHANNELS {
                out.push(quantize(self.data[c * n + p]));
            }
        }
        out
    }

    /// Inverse of [`Image::to_bytes`]: each byte divided by 255.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let n = height * width;
        if height == 0 || width == 0 || bytes.len() != CHANNELS * n {
            return Err(Error::DimensionMismatch(format!(
                "{} bytes for a {height}x{width} RGB raster",
                bytes.len()
            )));
        }
        let mut data = vec![0.0; CHANNELS * n];
        for p in 0..n {
            for c in 0..CHANNELS {
                data[c * n + p] = f64::from(bytes[p * CHANNELS + c]) / 255.0;
            }
        }
        Ok(Self { height, width, data })
    }

    /// The image after an 8-bit round trip.
    pub fn quantized(&self) -> Self {
        Self::from_bytes(self.height, self.width, &self.to_bytes()).expect("same dimensions")
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::open(path)
            .map_err(|e| match e {
                image::ImageError::IoError(io) => Error::io(path, io),
                other => Error::Image(other),
            })?
            .to_rgb8();
        Self::from_bytes(img.height() as usize, img.width() as usize, img.as_raw())
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_bytes())
            .expect("buffer length matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::Image(other),
        })
    }
}

/// Round-half-up mapping of `[0, 1]` onto `0..=255`.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor().min(255.0) as u8
}

pub fn clip_slice(data: &mut [f64]) {
    for v in data {
        *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    }
}

/// Mean squared error over all channels.
pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} vs {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let s: f64 = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.data.len() as f64)
}

/// Peak signal-to-noise ratio in dB with peak 1.0; `f64::INFINITY` for
/// identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(if m == 0.0 { f64::INFINITY } else { -10.0 * m.log10() })
}

/// `size × size` window at a uniformly drawn offset.
pub fn random_crop(img: &Image, size: usize, rng: &mut RandomSource) -> Result<Image> {
    if size == 0 || size > img.height.min(img.width) {
        return Err(Error::CropTooLarge {
            size,
            height: img.height,
            width: img.width,
        });
    }
    let (top, left) = crop_offset(img.dims(), size, rng);
    img.crop(top, left, size, size)
}

/// Offset drawn by [`random_crop`]; exposed so paired crops can share it.
pub fn crop_offset((height, width): (usize, usize), size: usize, rng: &mut RandomSource) -> (usize, usize) {
    let top = rng.random_range(0..=height - size);
    let left = rng.random_range(0..=width - size);
    (top, left)
}

/// Deterministic random stream identified by `(seed, stream id)`.
///
/// Streams with the same seed but different ids are independent ChaCha
/// streams under one key.
#[derive(Clone, Debug)]
pub struct RandomSource {
    seed: u64,
    stream: String,
    rng: ChaCha8Rng,
}

impl RandomSource {
    pub fn new(seed: u64, stream: &str) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_hash(stream));
        Self {
            seed,
            stream: stream.to_string(),
            rng,
        }
    }

    /// Child stream `parent/label`; does not advance `self`.
    pub fn derive(&self, label: &str) -> Self {
        Self::new(self.seed, &format!("{}/{}", self.stream, label))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> &str {
        &self.stream
    }
}

fn stream_hash(stream: &str) -> u64 {
    let digest = Sha256::digest(stream.as_bytes());
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

impl RngCore for RandomSource {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
}
