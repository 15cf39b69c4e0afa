//! Checkpoint file: magic `DFRCKPT1`, `u32` version, `u8` dtype tag, `u32`
//! diffusion steps, denoiser hyperparameters (`u32` size, width, depth,
//! time_hidden), `u64` parameter count and parameters, then `u8` head flag
//! and, if set, head hyperparameters (`u32` hidden1, hidden2, `f64` dropout),
//! `u64` count and parameters. All little-endian.

use std::path::Path;

use super::{DenoiserConfig, DenoiserModel, HeadConfig, QualityHead};
use crate::error::{Error, Result};
use crate::nn::Real;

pub const CKPT_MAGIC: [u8; 8] = *b"DFRCKPT1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<F> {
    /// Diffusion steps `T` the networks were trained for.
    pub steps: usize,
    pub denoiser: DenoiserModel<F>,
    pub head: Option<QualityHead<F>>,
}

impl<F: Real> Checkpoint<F> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&CKPT_MAGIC);
        out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        out.push(F::TAG);
        let u32le = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        u32le(&mut out, self.steps);
        let c = self.denoiser.config();
        for v in [c.size, c.width, c.depth, c.time_hidden] {
            u32le(&mut out, v);
        }
        write_params(&mut out, self.denoiser.params());
        match &self.head {
            None => out.push(0),
            Some(h) => {
                out.push(1);
                let hc = h.config();
                u32le(&mut out, hc.hidden1);
                u32le(&mut out, hc.hidden2);
                out.extend_from_slice(&hc.dropout.to_le_bytes());
                write_params(&mut out, h.params());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CKPT_MAGIC {
            return Err(Error::Load("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(Error::Load(format!("unsupported checkpoint version {version}")));
        }
        let tag = r.take(1)?[0];
        if tag != F::TAG {
            return Err(Error::Load(format!("checkpoint dtype tag {tag}, expected {}", F::TAG)));
        }
        let steps = r.u32()? as usize;
        let config = DenoiserConfig {
            size: r.u32()? as usize,
            width: r.u32()? as usize,
            depth: r.u32()? as usize,
            time_hidden: r.u32()? as usize,
        };
        let params = r.params::<F>()?;
        let denoiser = DenoiserModel::from_params(config.clone(), params).map_err(|e| Error::Load(e.to_string()))?;
        let head = match r.take(1)?[0] {
            0 => None,
            1 => {
                let hidden1 = r.u32()? as usize;
                let hidden2 = r.u32()? as usize;
                let dropout = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
                let hc = HeadConfig {
                    hidden1,
                    hidden2,
                    dropout,
                    ..HeadConfig::for_bottleneck(config.bottleneck_channels(), config.bottleneck_side())
                };
                let params = r.params::<F>()?;
                Some(QualityHead::from_params(hc, params).map_err(|e| Error::Load(e.to_string()))?)
            }
            b => return Err(Error::Load(format!("bad head flag {b}"))),
        };
        if r.pos != bytes.len() {
            return Err(Error::Load("trailing bytes in checkpoint".into()));
        }
        Ok(Checkpoint { steps, denoiser, head })
    }
}

fn write_params<F: Real>(out: &mut Vec<u8>, params: &[F]) {
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &p in params {
        p.write_le(out);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Load("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn params<F: Real>(&mut self) -> Result<Vec<F>> {
        let n = u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")) as usize;
        let raw = self.take(n.checked_mul(F::BYTES).ok_or_else(|| Error::Load("parameter count overflow".into()))?)?;
        Ok(raw.chunks_exact(F::BYTES).map(F::read_le).collect())
    }
}

pub fn save_checkpoint<F: Real>(ckpt: &Checkpoint<F>, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Checkpoint<F>> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Load and require a specific denoiser architecture.
pub fn load_checkpoint_expecting<F: Real>(path: &Path, expected: &DenoiserConfig) -> Result<Checkpoint<F>> {
    let ckpt = load_checkpoint::<F>(path)?;
    if ckpt.denoiser.config() != expected {
        return Err(Error::Load(format!(
            "checkpoint architecture {:?} does not match expected {:?}",
            ckpt.denoiser.config(),
            expected
        )));
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pattern::Pattern;
    use crate::synth::generate_master;

    fn ckpt() -> Checkpoint<f32> {
        let cfg = DenoiserConfig { size: 32, width: 4, depth: 2, time_hidden: 8 };
        let mut d = DenoiserModel::<f32>::new(cfg.clone(), 1).unwrap();
        d.params_mut().iter_mut().enumerate().for_each(|(i, p)| *p += (i as f32).cos() * 1e-2);
        let h = QualityHead::new(HeadConfig::for_bottleneck(cfg.bottleneck_channels(), cfg.bottleneck_side()), 2).unwrap();
        Checkpoint { steps: 64, denoiser: d, head: Some(h) }
    }

    #[test]
    fn round_trip_preserves_outputs_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = ckpt();
        save_checkpoint(&c, &path).unwrap();
        let back = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(back, c);
        let x: Pattern = generate_master(4, 32, 3).unwrap();
        let (a, ba) = c.denoiser.predict(&x, &x, 10).unwrap();
        let (b, bb) = back.denoiser.predict(&x, &x, 10).unwrap();
        assert_eq!(a, b);
        let head = c.head.as_ref().unwrap();
        assert_eq!(head.predict(&ba).unwrap(), back.head.as_ref().unwrap().predict(&bb).unwrap());
        assert_eq!(&std::fs::read(&path).unwrap()[..8], b"DFRCKPT1");
    }

    #[test]
    fn format_guards() {
        let c = ckpt();
        let mut bytes = c.to_bytes();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(matches!(Checkpoint::<f64>::from_bytes(&bytes), Err(Error::Load(_))));
        bytes[8] = 2;
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Load(_))));
        let mut bytes = c.to_bytes();
        bytes[0] = b'x';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bytes), Err(Error::Load(_))));
    }

    #[test]
    fn mismatched_width_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&ckpt(), &path).unwrap();
        let other = DenoiserConfig { size: 32, width: 8, depth: 2, time_hidden: 8 };
        assert!(matches!(load_checkpoint_expecting::<f32>(&path, &other), Err(Error::Load(_))));
    }
}
