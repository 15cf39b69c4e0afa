//! Synthetic dataset assembly and the binary dataset container.
//!
//! Container layout (little-endian): magic `DFRCT1\0\0`, `u32` version (1),
//! `u32` height, `u32` width, `u32` sample count, then per sample `f32` q,
//! `u8` is_noise, `f32[h*w]` x0 and `f32[h*w]` x, both row-major.

use std::ops::Range;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, Error, Result};
use crate::exec::{try_map_indexed, ExecPolicy};
use crate::pattern::{minmax01_normalize, Pattern};
use crate::rng::{derive_seed, stream_rng};
use crate::synth::{
    check_size, compute_quality, corrupt, generate_master, generate_pure_noise, CorruptionSpec, Sample, MAX_BANDS,
    MIN_BANDS,
};

pub const DATASET_MAGIC: [u8; 8] = *b"DFRCT1\0\0";
pub const DATASET_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn id(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub size: usize,
    /// Fraction of every split made of pure instrumental-noise frames.
    pub noise_frac: f64,
    pub min_bands: usize,
    pub max_bands: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 200,
            val: 20,
            test: 20,
            size: 64,
            noise_frac: 0.1,
            min_bands: 3,
            max_bands: 8,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(invalid_config("every split needs at least one sample"));
        }
        check_size(self.size)?;
        if !(0.0..=1.0).contains(&self.noise_frac) {
            return Err(invalid_config("noise_frac must lie in [0, 1]"));
        }
        if self.min_bands < MIN_BANDS || self.max_bands > MAX_BANDS || self.min_bands > self.max_bands {
            return Err(invalid_config(format!(
                "band range must satisfy {MIN_BANDS} <= min <= max <= {MAX_BANDS}"
            )));
        }
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    pub fn noise_count(&self, split: Split) -> usize {
        (self.count(split) as f64 * self.noise_frac).round() as usize
    }

    /// Sample index ranges of each split inside the container (train, val, test order).
    pub fn layout(&self) -> SplitLayout {
        SplitLayout {
            train: 0..self.train,
            val: self.train..self.train + self.val,
            test: self.train + self.val..self.train + self.val + self.test,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitLayout {
    pub train: Range<usize>,
    pub val: Range<usize>,
    pub test: Range<usize>,
}

impl SplitLayout {
    pub fn range(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(height: usize, width: usize, samples: Vec<Sample>) -> Result<Self> {
        for s in &samples {
            if s.x.shape() != (height, width) {
                return Err(Error::InvalidInput("sample shape differs from dataset shape".into()));
            }
            s.validate()?;
        }
        Ok(Dataset { height, width, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Copy of the samples in `range`.
    pub fn subset(&self, range: Range<usize>) -> Result<Dataset> {
        if range.end > self.len() {
            return Err(Error::InvalidInput(format!(
                "range {range:?} exceeds dataset of {} samples",
                self.len()
            )));
        }
        Ok(Dataset {
            height: self.height,
            width: self.width,
            samples: self.samples[range].to_vec(),
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(24 + self.len() * (5 + 8 * n));
        out.extend_from_slice(&DATASET_MAGIC);
        out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.height as u32).to_le_bytes());
        out.extend_from_slice(&(self.width as u32).to_le_bytes());
        out.extend_from_slice(&(self.len() as u32).to_le_bytes());
        for s in &self.samples {
            out.extend_from_slice(&(s.q as f32).to_le_bytes());
            out.push(u8::from(s.is_noise));
            for p in [&s.x0, &s.x] {
                for &v in p.pixels() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(8)? != DATASET_MAGIC {
            return Err(Error::Load("bad dataset magic".into()));
        }
        let version = r.u32()?;
        if version != DATASET_VERSION {
            return Err(Error::Load(format!("unsupported dataset version {version}")));
        }
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let count = r.u32()? as usize;
        let n = height * width;
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let q = r.f32()? as f64;
            let is_noise = match r.take(1)?[0] {
                0 => false,
                1 => true,
                b => return Err(Error::Load(format!("sample {i}: bad is_noise byte {b}"))),
            };
            let read_pattern = |r: &mut ByteReader| -> Result<Pattern> {
                let px = (0..n).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
                let p = Pattern::new(height, width, px).map_err(|e| Error::Load(e.to_string()))?;
                if !p.is_finite() {
                    return Err(Error::Load(format!("sample {i}: non-finite pixel")));
                }
                Ok(p)
            };
            let x0 = read_pattern(&mut r)?;
            let x = read_pattern(&mut r)?;
            let s = Sample { x0, x, q, is_noise };
            s.validate().map_err(|e| Error::Load(format!("sample {i}: {e}")))?;
            samples.push(s);
        }
        if r.pos != bytes.len() {
            return Err(Error::Load("trailing bytes after last sample".into()));
        }
        Ok(Dataset { height, width, samples })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Load("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

fn round_f32(p: &Pattern) -> Pattern {
    p.map(|v| v as f32 as f64)
}

/// One real sample: random master and random corruption, with both the master
/// and the observation rescaled to `[0, 1]`. Pixels and q are rounded to `f32` so the in-memory sample equals
/// its serialized form.
pub fn generate_real_sample(config: &DatasetConfig, seed: u64) -> Result<Sample> {
    let mut rng = stream_rng(seed, 10);
    let n_bands = rng.random_range(config.min_bands..=config.max_bands);
    let spec = CorruptionSpec::sample(&mut rng);
    let master = generate_master(n_bands, config.size, derive_seed(seed, &[1]))?;
    let x0 = round_f32(&minmax01_normalize(&master)?);
    let x = corrupt(&x0, &spec, derive_seed(seed, &[2]))?;
    let x = round_f32(&minmax01_normalize(&x)?);
    let q = compute_quality(&x, &x0)? as f32 as f64;
    Ok(Sample { x0, x, q, is_noise: false })
}

fn generate_noise_sample(size: usize, seed: u64) -> Result<Sample> {
    let mut s = generate_pure_noise(size, seed)?;
    s.x = round_f32(&s.x);
    Ok(s)
}

/// Splits occupy disjoint seed ranges: sample `i` of split `k` uses raw seed
/// `(k << 40) + i` before mixing with the run seed.
fn sample_seed(seed: u64, split: Split, index: usize) -> u64 {
    derive_seed(seed, &[(split.id() << 40) + index as u64])
}

pub fn build_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset> {
    build_dataset_with(config, seed, ExecPolicy::default())
}

pub fn build_dataset_with(config: &DatasetConfig, seed: u64, policy: ExecPolicy) -> Result<Dataset> {
    config.validate()?;
    let mut samples = Vec::with_capacity(config.train + config.val + config.test);
    for split in Split::ALL {
        let n = config.count(split);
        let k = config.noise_count(split);
        let mut is_noise = vec![false; n];
        let mut rng = stream_rng(derive_seed(seed, &[split.id(), 0xC0FFEE]), 0);
        for i in index::sample(&mut rng, n, k) {
            is_noise[i] = true;
        }
        let part = try_map_indexed(policy, n, |i| {
            let s = sample_seed(seed, split, i);
            if is_noise[i] {
                generate_noise_sample(config.size, s)
            } else {
                generate_real_sample(config, s)
            }
        })?;
        samples.extend(part);
    }
    Dataset::new(config.size, config.size, samples)
}

/// Build and write the container in one go.
pub fn build_dataset_file(config: &DatasetConfig, seed: u64, path: &Path) -> Result<Dataset> {
    let ds = build_dataset(config, seed)?;
    ds.write(path)?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig { train: 100, val: 6, test: 6, size: 32, ..DatasetConfig::default() }
    }

    #[test]
    fn exact_noise_fraction_and_split_sizes() {
        let cfg = small();
        let ds = build_dataset(&cfg, 7).unwrap();
        assert_eq!(ds.len(), 112);
        let layout = cfg.layout();
        let train_noise = ds.samples[layout.train.clone()].iter().filter(|s| s.is_noise).count();
        assert_eq!(train_noise, 10);
        for s in &ds.samples {
            s.validate().unwrap();
            if !s.is_noise {
                assert!((0.02f32 as f64..=0.98f32 as f64).contains(&s.q));
            }
        }
    }

    #[test]
    fn deterministic_and_policy_independent() {
        let cfg = small();
        let a = build_dataset_with(&cfg, 3, ExecPolicy::Sequential).unwrap().to_bytes();
        let b = build_dataset_with(&cfg, 3, ExecPolicy::Parallel).unwrap().to_bytes();
        assert_eq!(a, b);
        assert_ne!(a, build_dataset(&cfg, 4).unwrap().to_bytes());
    }

    #[test]
    fn round_trip_is_lossless() {
        let ds = build_dataset(&DatasetConfig { train: 5, val: 2, test: 2, size: 32, ..DatasetConfig::default() }, 1).unwrap();
        let bytes = ds.to_bytes();
        let back = Dataset::from_bytes(&bytes).unwrap();
        assert_eq!(back, ds);
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in back.samples.iter().zip(&ds.samples) {
            assert_eq!(a.q.to_bits(), b.q.to_bits());
        }
    }

    #[test]
    fn rejects_zero_counts_and_corrupt_files() {
        let cfg = DatasetConfig { train: 0, ..small() };
        assert!(matches!(build_dataset(&cfg, 1), Err(Error::InvalidConfig(_))));
        let ds = build_dataset(&DatasetConfig { train: 2, val: 1, test: 1, size: 32, ..DatasetConfig::default() }, 1).unwrap();
        let mut bytes = ds.to_bytes();
        assert!(Dataset::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        bytes[0] = b'X';
        assert!(matches!(Dataset::from_bytes(&bytes), Err(Error::Load(_))));
    }

    #[test]
    fn header_layout() {
        let ds = build_dataset(&DatasetConfig { train: 1, val: 1, test: 1, size: 32, ..DatasetConfig::default() }, 1).unwrap();
        let b = ds.to_bytes();
        assert_eq!(&b[..8], b"DFRCT1\0\0");
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[12..16].try_into().unwrap()), 32);
        assert_eq!(u32::from_le_bytes(b[16..20].try_into().unwrap()), 32);
        assert_eq!(u32::from_le_bytes(b[20..24].try_into().unwrap()), 3);
        assert_eq!(b.len(), 24 + 3 * (5 + 8 * 32 * 32));
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let cfg = DatasetConfig { train: 1, val: 1, test: 1, size: 32, ..DatasetConfig::default() };
        let err = build_dataset_file(&cfg, 1, Path::new("/nonexistent-dir/x/data.dfrct")).unwrap_err();
        assert!(matches!(err, Error::Io(_)));
    }
}
