//! Images and binary masks shared by every stage, plus their PNG codecs.
//!
//! Masks follow the static-map convention throughout the crate: `true`
//! marks a static pixel, `false` a transient one. On disk a mask is an
//! 8-bit grayscale PNG with 0 for transient and 255 for static.

use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, Luma, Rgb, RgbImage};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum RasterError {
    #[error("dimension mismatch: {expected_w}x{expected_h} vs {got_w}x{got_h}")]
    DimensionMismatch {
        expected_w: u32,
        expected_h: u32,
        got_w: u32,
        got_h: u32,
    },
    #[error("invalid raster: {0}")]
    Invalid(String),
    #[error("png codec: {0}")]
    Codec(#[from] image::ImageError),
    #[error("i/o on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub fn check_dims(a: (u32, u32), b: (u32, u32)) -> Result<(), RasterError> {
    if a != b {
        return Err(RasterError::DimensionMismatch {
            expected_w: a.0,
            expected_h: a.1,
            got_w: b.0,
            got_h: b.1,
        });
    }
    Ok(())
}

/// Row-major linear RGB image with channels in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    width: u32,
    height: u32,
    pixels: Vec<[f64; 3]>,
}

impl Image {
    pub fn new(width: u32, height: u32, pixels: Vec<[f64; 3]>) -> Result<Self, RasterError> {
        if pixels.len() != width as usize * height as usize {
            return Err(RasterError::Invalid(format!(
                "{} pixels for a {width}x{height} image",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels
            .iter()
            .flatten()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(RasterError::Invalid(format!("channel value {bad} outside [0,1]")));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, color: [f64; 3]) -> Self {
        Self::new(width, height, vec![color; width as usize * height as usize])
            .expect("fill color must lie in [0,1]")
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[[f64; 3]] {
        &self.pixels
    }

    pub fn get(&self, x: u32, y: u32) -> [f64; 3] {
        self.pixels[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, rgb: [f64; 3]) {
        let clamped = rgb.map(|c| c.clamp(0.0, 1.0));
        self.pixels[(y * self.width + x) as usize] = clamped;
    }

    /// Quantizes to 8 bits per channel.
    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width, self.height, |x, y| {
            Rgb(self.get(x, y).map(quantize))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let pixels = img
            .pixels()
            .map(|p| p.0.map(|c| f64::from(c) / 255.0))
            .collect();
        Self {
            width: img.width(),
            height: img.height(),
            pixels,
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut buf = Cursor::new(Vec::new());
        self.to_rgb8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        write_file(path, &self.encode_png()?)
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        Self::decode_png(&read_file(path)?)
    }
}

fn quantize(c: f64) -> u8 {
    (c.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Row-major `{0,1}` mask.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, RasterError> {
        if bits.len() != width as usize * height as usize {
            return Err(RasterError::Invalid(format!(
                "{} bits for a {width}x{height} mask",
                bits.len()
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn zeros(width: u32, height: u32) -> Self {
        Self::filled(width, height, false)
    }

    pub fn ones(width: u32, height: u32) -> Self {
        Self::filled(width, height, true)
    }

    pub fn filled(width: u32, height: u32, value: bool) -> Self {
        Self {
            width,
            height,
            bits: vec![value; width as usize * height as usize],
        }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width as usize * height as usize);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[(y * self.width + x) as usize]
    }

    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        self.bits[(y * self.width + x) as usize] = value;
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn fraction_ones(&self) -> f64 {
        if self.bits.is_empty() {
            return 0.0;
        }
        self.count_ones() as f64 / self.bits.len() as f64
    }

    pub fn is_all_zero(&self) -> bool {
        !self.bits.iter().any(|b| *b)
    }

    pub fn complement(&self) -> Self {
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    fn zip(&self, other: &Self, op: impl Fn(bool, bool) -> bool) -> Result<Self, RasterError> {
        check_dims(self.dims(), other.dims())?;
        Ok(Self {
            width: self.width,
            height: self.height,
            bits: self
                .bits
                .iter()
                .zip(&other.bits)
                .map(|(a, b)| op(*a, *b))
                .collect(),
        })
    }

    pub fn union(&self, other: &Self) -> Result<Self, RasterError> {
        self.zip(other, |a, b| a || b)
    }

    pub fn intersection(&self, other: &Self) -> Result<Self, RasterError> {
        self.zip(other, |a, b| a && b)
    }

    /// Number of pixels set in both masks.
    pub fn overlap(&self, other: &Self) -> Result<usize, RasterError> {
        check_dims(self.dims(), other.dims())?;
        Ok(self
            .bits
            .iter()
            .zip(&other.bits)
            .filter(|(a, b)| **a && **b)
            .count())
    }

    pub fn is_subset_of(&self, other: &Self) -> bool {
        self.dims() == other.dims() && self.bits.iter().zip(&other.bits).all(|(a, b)| !*a || *b)
    }

    pub fn to_gray8(&self) -> GrayImage {
        GrayImage::from_fn(self.width, self.height, |x, y| {
            Luma([if self.get(x, y) { 255 } else { 0 }])
        })
    }

    /// Any nonzero gray level counts as set.
    pub fn from_gray8(img: &GrayImage) -> Self {
        Self {
            width: img.width(),
            height: img.height(),
            bits: img.pixels().map(|p| p.0[0] >= 128).collect(),
        }
    }

    pub fn encode_png(&self) -> Result<Vec<u8>, RasterError> {
        let mut buf = Cursor::new(Vec::new());
        self.to_gray8().write_to(&mut buf, ImageFormat::Png)?;
        Ok(buf.into_inner())
    }

    pub fn decode_png(bytes: &[u8]) -> Result<Self, RasterError> {
        let img = image::load_from_memory_with_format(bytes, ImageFormat::Png)?;
        Ok(Self::from_gray8(&img.to_luma8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<(), RasterError> {
        write_file(path, &self.encode_png()?)
    }

    pub fn load_png(path: &Path) -> Result<Self, RasterError> {
        Self::decode_png(&read_file(path)?)
    }
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<(), RasterError> {
    let io_err = |source| RasterError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    std::fs::write(path, bytes).map_err(io_err)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, RasterError> {
    std::fs::read(path).map_err(|source| RasterError::Io {
        path: path.display().to_string(),
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_png_round_trip() {
        let m = BinaryMask::from_fn(5, 3, |x, y| (x + y) % 2 == 0);
        let bytes = m.encode_png().unwrap();
        assert_eq!(BinaryMask::decode_png(&bytes).unwrap(), m);
        let gray = image::load_from_memory(&bytes).unwrap().to_luma8();
        assert!(gray.pixels().all(|p| p.0[0] == 0 || p.0[0] == 255));
    }

    #[test]
    fn image_png_quantizes_to_8_bits() {
        let img = Image::filled(2, 2, [0.5, 0.25, 1.0]);
        let back = Image::decode_png(&img.encode_png().unwrap()).unwrap();
        for (a, b) in img.pixels().iter().flatten().zip(back.pixels().iter().flatten()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn rejects_out_of_range_channels() {
        assert!(Image::new(1, 1, vec![[1.5, 0.0, 0.0]]).is_err());
        assert!(Image::new(1, 1, vec![[f64::NAN, 0.0, 0.0]]).is_err());
        assert!(Image::new(2, 1, vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn set_algebra_checks_dims() {
        let a = BinaryMask::ones(2, 2);
        let b = BinaryMask::zeros(2, 3);
        assert!(matches!(
            a.union(&b),
            Err(RasterError::DimensionMismatch { .. })
        ));
    }
}
