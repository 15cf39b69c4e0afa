//! Ground-truth stand-ins for the learned networks, keyed by the exact
//! observation `x`.

use std::collections::HashMap;

use super::{Bottleneck, Denoiser, QualityAssessor};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::nn::FeatureMap;
use crate::pattern::Pattern;

fn unknown(x: &Pattern) -> Error {
    Error::Lookup(format!("observation {} not in oracle dataset", &x.digest()[..12]))
}

/// Returns the stored clean pattern for observation `x`, ignoring `x_t` and `t`.
#[derive(Clone, Debug)]
pub struct OracleDenoiser {
    clean: HashMap<String, Pattern>,
}

pub fn make_oracle_denoiser(dataset: &Dataset) -> OracleDenoiser {
    OracleDenoiser {
        clean: dataset.samples.iter().map(|s| (s.x.digest(), s.x0.clone())).collect(),
    }
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, _x_t: &Pattern, x: &Pattern, _t: usize) -> Result<(Pattern, Bottleneck)> {
        let x0 = self.clean.get(&x.digest()).ok_or_else(|| unknown(x))?;
        Ok((x0.clone(), FeatureMap::zeros(1, 1, 1)))
    }
}

/// Reports the stored quality and a progress of `1 - (t - 1) / T`, which
/// makes the feedback loop advance exactly one step per iteration.
#[derive(Clone, Debug)]
pub struct OracleQuality {
    quality: HashMap<String, f64>,
    steps: usize,
}

pub fn make_oracle_quality(dataset: &Dataset, steps: usize) -> OracleQuality {
    OracleQuality {
        quality: dataset.samples.iter().map(|s| (s.x.digest(), s.q)).collect(),
        steps,
    }
}

impl OracleQuality {
    pub fn progress_at(&self, t: usize) -> f64 {
        (1.0 - (t as f64 - 1.0) / self.steps as f64).clamp(0.0, 1.0)
    }
}

impl QualityAssessor for OracleQuality {
    fn assess(&self, _bottleneck: &Bottleneck, x: &Pattern, t: usize) -> Result<(f64, f64)> {
        let q = *self.quality.get(&x.digest()).ok_or_else(|| unknown(x))?;
        Ok((q, self.progress_at(t)))
    }
}
