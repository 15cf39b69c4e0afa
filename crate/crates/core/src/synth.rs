//! Synthetic Kikuchi-style patterns: straight diffraction bands over a flat
//! background, detector-like corruption, and pure instrumental-noise frames.
//!
//! Band geometry lives on the detector plane `z = 1` with pixel centres mapped
//! onto `[-1, 1]^2`. A band is the trace of a lattice plane with unit normal
//! `n`, i.e. the line `n_x u + n_y v + n_z = 0`. Its cross-profile is flat
//! within half its width of the centreline and falls off with Gaussian flanks.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::pattern::{minmax01_normalize, Pattern};
use crate::rng::stream_rng;

pub const MIN_BANDS: usize = 2;
pub const MAX_BANDS: usize = 12;
pub const SUPPORTED_SIZES: [usize; 3] = [32, 64, 128];

/// Quality is bounded away from 0 and 1 so `T (1 - q)` never degenerates.
pub const QUALITY_FLOOR: f64 = 0.02;
pub const QUALITY_CEIL: f64 = 0.98;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandSpec {
    pub normal: [f64; 3],
    pub width: f64,
    pub amplitude: f64,
}

impl BandSpec {
    pub fn new(normal: [f64; 3], width: f64, amplitude: f64) -> Result<Self> {
        let norm = normal.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(invalid_config(format!("band normal must be unit length, got |n| = {norm}")));
        }
        if normal[0].hypot(normal[1]) < 1e-9 {
            return Err(invalid_config("band plane is parallel to the detector"));
        }
        if !(width > 0.0) {
            return Err(invalid_config("band width must be positive"));
        }
        if !(amplitude > 0.0 && amplitude <= 1.0) {
            return Err(invalid_config("band amplitude must lie in (0, 1]"));
        }
        Ok(BandSpec { normal, width, amplitude })
    }

    /// Band through the detector line `u cos θ + v sin θ = ρ`.
    pub fn from_line(theta: f64, rho: f64, width: f64, amplitude: f64) -> Result<Self> {
        let (s, c) = theta.sin_cos();
        let n = [c, s, -rho];
        let len = n.iter().map(|v| v * v).sum::<f64>().sqrt();
        Self::new([n[0] / len, n[1] / len, n[2] / len], width, amplitude)
    }

    /// Perpendicular distance from detector point `(u, v)` to the centreline.
    pub fn distance(&self, u: f64, v: f64) -> f64 {
        let [nx, ny, nz] = self.normal;
        (nx * u + ny * v + nz).abs() / nx.hypot(ny)
    }

    /// Cross-profile value at perpendicular distance `d`, in `[0, amplitude]`.
    pub fn profile(&self, d: f64) -> f64 {
        let half = 0.5 * self.width;
        if d <= half {
            self.amplitude
        } else {
            let sigma = half;
            let e = d - half;
            self.amplitude * (-e * e / (2.0 * sigma * sigma)).exp()
        }
    }
}

/// Detector coordinate of pixel index `i` along an axis of `n` pixels.
pub fn pixel_coord(i: usize, n: usize) -> f64 {
    (2 * i + 1) as f64 / n as f64 - 1.0
}

/// Sum of band profiles over a constant background, clamped to `[0, 1]`.
pub fn render_bands(bands: &[BandSpec], background: f64, size: usize) -> Result<Pattern> {
    Pattern::from_fn(size, size, |r, c| {
        let u = pixel_coord(c, size);
        let v = pixel_coord(r, size);
        let s: f64 = bands.iter().map(|b| b.profile(b.distance(u, v))).sum();
        (background + s).clamp(0.0, 1.0)
    })
}

/// Random band set for a `size` x `size` master. The first band is always
/// bright (amplitude >= 0.8) so every master has a strong ridge.
pub fn sample_bands(n_bands: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<BandSpec>> {
    let spacing = 2.0 / size as f64;
    let min_width = (2.5 * spacing).max(0.08);
    (0..n_bands)
        .map(|i| {
            let theta = rng.random_range(0.0..std::f64::consts::PI);
            let rho = rng.random_range(-0.7..0.7);
            let width = rng.random_range(min_width..min_width.max(0.25) + 1e-9);
            let amplitude = if i == 0 {
                rng.random_range(0.8..=1.0)
            } else {
                rng.random_range(0.25..=0.8)
            };
            BandSpec::from_line(theta, rho, width, amplitude)
        })
        .collect()
}

pub fn generate_master(n_bands: usize, size: usize, seed: u64) -> Result<Pattern> {
    if !(MIN_BANDS..=MAX_BANDS).contains(&n_bands) {
        return Err(invalid_config(format!(
            "n_bands must lie in [{MIN_BANDS}, {MAX_BANDS}], got {n_bands}"
        )));
    }
    check_size(size)?;
    let mut rng = stream_rng(seed, 0);
    let background = rng.random_range(0.05..0.2);
    let bands = sample_bands(n_bands, size, &mut rng)?;
    render_bands(&bands, background, size)
}

pub fn check_size(size: usize) -> Result<()> {
    if !SUPPORTED_SIZES.contains(&size) {
        return Err(invalid_config(format!("size must be one of {SUPPORTED_SIZES:?}, got {size}")));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionSpec {
    pub gaussian_sigma: f64,
    /// Expected counts per unit intensity; 0 disables shot noise.
    pub poisson_scale: f64,
    pub background_gain: f64,
    /// Added intensity per pixel step along the columns, centred on the image.
    pub background_tilt: f64,
}

impl CorruptionSpec {
    pub fn identity() -> Self {
        CorruptionSpec {
            gaussian_sigma: 0.0,
            poisson_scale: 0.0,
            background_gain: 1.0,
            background_tilt: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0) {
            return Err(invalid_config("gaussian_sigma must be non-negative"));
        }
        if !(self.poisson_scale >= 0.0) {
            return Err(invalid_config("poisson_scale must be non-negative"));
        }
        if !self.background_gain.is_finite() || !self.background_tilt.is_finite() {
            return Err(invalid_config("background parameters must be finite"));
        }
        Ok(())
    }

    /// Corruption severity used by the dataset generator.
    pub fn sample(rng: &mut impl Rng) -> Self {
        let poisson_scale = if rng.random_bool(0.5) {
            rng.random_range(20.0..200.0)
        } else {
            0.0
        };
        CorruptionSpec {
            gaussian_sigma: rng.random_range(0.05..0.45),
            poisson_scale,
            background_gain: rng.random_range(0.6..1.0),
            background_tilt: rng.random_range(-0.004..0.004),
        }
    }
}

/// Corruption before the final clamp. Order: background transform, additive
/// Gaussian, Poisson resampling.
pub(crate) fn corrupt_unclamped(x0: &Pattern, spec: &CorruptionSpec, seed: u64) -> Result<Pattern> {
    spec.validate()?;
    let (_, w) = x0.shape();
    let centre = (w as f64 - 1.0) / 2.0;
    let mut gauss_rng = stream_rng(seed, 1);
    let mut shot_rng = stream_rng(seed, 2);
    let normal = Normal::new(0.0, spec.gaussian_sigma.max(0.0)).map_err(|e| invalid_config(e.to_string()))?;
    let mut out = x0.clone();
    for (i, v) in out.pixels_mut().iter_mut().enumerate() {
        let col = (i % w) as f64;
        let mut y = spec.background_gain * *v + spec.background_tilt * (col - centre);
        if spec.gaussian_sigma > 0.0 {
            y += normal.sample(&mut gauss_rng);
        }
        if spec.poisson_scale > 0.0 {
            let lambda = y.max(0.0) * spec.poisson_scale;
            y = if lambda > 0.0 {
                let p = Poisson::new(lambda).map_err(|e| invalid_config(e.to_string()))?;
                p.sample(&mut shot_rng) / spec.poisson_scale
            } else {
                0.0
            };
        }
        *v = y;
    }
    Ok(out)
}

pub fn corrupt(x0: &Pattern, spec: &CorruptionSpec, seed: u64) -> Result<Pattern> {
    Ok(corrupt_unclamped(x0, spec, seed)?.map(|v| v.clamp(0.0, 1.0)))
}

pub fn pearson(a: &Pattern, b: &Pattern) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (ma, mb) = (a.mean(), b.mean());
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.pixels().iter().zip(b.pixels()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / (saa * sbb).sqrt())
}

/// Clamped Pearson correlation of the observation with its clean master.
pub fn compute_quality(x: &Pattern, x0: &Pattern) -> Result<f64> {
    x.ensure_same_shape(x0)?;
    if x0.max() - x0.min() <= 0.0 {
        return Err(invalid_input("quality is undefined for a constant clean pattern"));
    }
    Ok(pearson(x, x0)?.clamp(QUALITY_FLOOR, QUALITY_CEIL))
}

/// One training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x0: Pattern,
    pub x: Pattern,
    pub q: f64,
    pub is_noise: bool,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        self.x.ensure_same_shape(&self.x0)?;
        if !(0.0..=1.0).contains(&self.q) {
            return Err(invalid_input(format!("quality {} outside [0, 1]", self.q)));
        }
        if self.is_noise && self.q != 0.0 {
            return Err(invalid_input("noise samples must have q = 0"));
        }
        Ok(())
    }
}

/// Instrumental noise with no specimen: standard Gaussian, rescaled to `[0, 1]`.
pub fn generate_pure_noise(size: usize, seed: u64) -> Result<Sample> {
    check_size(size)?;
    let mut rng = stream_rng(seed, 3);
    let normal = Normal::new(0.0, 1.0).map_err(|e| invalid_config(e.to_string()))?;
    let raw = Pattern::new(size, size, (0..size * size).map(|_| normal.sample(&mut rng)).collect())?;
    Ok(Sample {
        x0: Pattern::zeros(size, size)?,
        x: minmax01_normalize(&raw)?,
        q: 0.0,
        is_noise: true,
    })
}
