//! Raster types shared by every stage of the pipeline.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

pub type Rgb = [u8; 3];

fn check_dims(width: usize, height: usize, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::ZeroDimension { width, height });
    }
    if width.checked_mul(height) != Some(len) {
        return Err(Error::BufferLength {
            width,
            height,
            actual: len,
        });
    }
    Ok(())
}

/// 8-bit RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<Rgb>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<Rgb>) -> Result<Self> {
        check_dims(width, height, pixels.len())?;
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, rgb: Rgb) -> Result<Self> {
        Self::new(width, height, vec![rgb; width.saturating_mul(height)])
    }

    /// Builds an image from a packed `RGBRGB...` buffer.
    pub fn from_raw(width: usize, height: usize, raw: &[u8]) -> Result<Self> {
        if !raw.len().is_multiple_of(3) {
            return Err(Error::BufferLength {
                width,
                height,
                actual: raw.len() / 3,
            });
        }
        let pixels = raw.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
        Self::new(width, height, pixels)
    }

    /// Builds an image from a grayscale buffer, replicating each value into
    /// all three channels.
    pub fn from_gray(width: usize, height: usize, gray: &[u8]) -> Result<Self> {
        Self::new(width, height, gray.iter().map(|&g| [g, g, g]).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[Rgb] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [Rgb] {
        &mut self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        self.pixels[y * self.width + x]
    }

    pub fn to_raw(&self) -> Vec<u8> {
        self.pixels.iter().flat_map(|p| p.iter().copied()).collect()
    }
}

/// Binary per-pixel occlusion map, `true` meaning occluded.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct OcclusionMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl OcclusionMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        check_dims(width, height, bits.len())?;
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn empty(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![false; width.saturating_mul(height)])
    }

    pub fn full(width: usize, height: usize) -> Result<Self> {
        Self::new(width, height, vec![true; width.saturating_mul(height)])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn count_occluded(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Fraction of occluded pixels.
    pub fn coverage(&self) -> f64 {
        self.count_occluded() as f64 / self.bits.len() as f64
    }

    /// The mask as an anomaly map with values 0 and 1.
    pub fn to_anomaly_map(&self) -> AnomalyMap {
        let values = self.bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        AnomalyMap {
            width: self.width,
            height: self.height,
            values,
        }
    }
}

/// Per-pixel occlusion likelihood in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnomalyMap {
    width: usize,
    height: usize,
    values: Vec<f32>,
}

impl AnomalyMap {
    pub fn new(width: usize, height: usize, values: Vec<f32>) -> Result<Self> {
        check_dims(width, height, values.len())?;
        if let Some(&bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange { value: bad as f64 });
        }
        Ok(Self {
            width,
            height,
            values,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.values[y * self.width + x]
    }
}

/// An image with its class label and a name unique within its dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabeledImage {
    pub name: String,
    pub label: String,
    pub image: Image,
}
