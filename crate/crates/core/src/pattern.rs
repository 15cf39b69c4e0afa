//! Single-channel image container and the two normalization conventions used
//! throughout the pipeline: z-score (denoiser training inputs) and min-max to
//! `[0, 1]` (feedback-loop inputs, metrics, exported images).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid_input, Result};

/// Smallest supported side length.
pub const MIN_SIDE: usize = 8;

/// Standard deviations below this are treated as a constant image.
pub const DEGENERATE_STD: f64 = 1e-8;

/// Row-major single-channel image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pattern {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
}

impl Pattern {
    pub fn new(height: usize, width: usize, pixels: Vec<f64>) -> Result<Self> {
        if height < MIN_SIDE || width < MIN_SIDE {
            return Err(invalid_input(format!(
                "pattern must be at least {MIN_SIDE}x{MIN_SIDE}, got {height}x{width}"
            )));
        }
        if pixels.len() != height * width {
            return Err(invalid_input(format!(
                "pixel buffer has {} values, expected {}",
                pixels.len(),
                height * width
            )));
        }
        Ok(Pattern { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn zeros(height: usize, width: usize) -> Result<Self> {
        Self::filled(height, width, 0.0)
    }

    /// Build from a function of `(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let pixels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self::new(height, width, pixels)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.pixels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f64] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pixels[row * self.width + col]
    }

    pub fn is_finite(&self) -> bool {
        self.pixels.iter().all(|v| v.is_finite())
    }

    pub fn min(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.pixels.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn mean(&self) -> f64 {
        self.pixels.iter().sum::<f64>() / self.len() as f64
    }

    /// Population standard deviation.
    pub fn std(&self) -> f64 {
        let mean = self.mean();
        let var = self.pixels.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.len() as f64;
        var.sqrt()
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Pattern {
        Pattern {
            height: self.height,
            width: self.width,
            pixels: self.pixels.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn ensure_same_shape(&self, other: &Pattern) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(invalid_input(format!(
                "shape mismatch: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Pattern, b: f64) -> Result<Pattern> {
        self.ensure_same_shape(other)?;
        Ok(Pattern {
            height: self.height,
            width: self.width,
            pixels: self
                .pixels
                .iter()
                .zip(&other.pixels)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
        })
    }

    pub fn max_abs_diff(&self, other: &Pattern) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .pixels
            .iter()
            .zip(&other.pixels)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    /// SHA-256 over shape and the little-endian bytes of every pixel, hex encoded.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.height as u64).to_le_bytes());
        h.update((self.width as u64).to_le_bytes());
        for v in &self.pixels {
            h.update(v.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_normalizable(p: &Pattern) -> Result<()> {
    if p.len() < 2 {
        return Err(invalid_input("normalization needs at least two pixels"));
    }
    if !p.is_finite() {
        return Err(invalid_input("pattern contains non-finite pixels"));
    }
    Ok(())
}

/// Zero mean, unit (population) standard deviation. A constant input maps to
/// all zeros.
pub fn zscore_normalize(p: &Pattern) -> Result<Pattern> {
    check_normalizable(p)?;
    let mean = p.mean();
    let std = p.std();
    if std < DEGENERATE_STD {
        return Ok(p.map(|_| 0.0));
    }
    Ok(p.map(|v| (v - mean) / std))
}

/// Affine rescale onto `[0, 1]`. A constant input maps to all 0.5.
pub fn minmax01_normalize(p: &Pattern) -> Result<Pattern> {
    check_normalizable(p)?;
    let lo = p.min();
    let hi = p.max();
    let range = hi - lo;
    if range <= 0.0 {
        return Ok(p.map(|_| 0.5));
    }
    Ok(p.map(|v| (v - lo) / range))
}
