//! Trainable networks and their test doubles.
//!
//! The feedback loop only sees two traits: a [`Denoiser`] mapping
//! `(x_t, x, t)` to a clean-pattern estimate plus its bottleneck features, and
//! a [`QualityAssessor`] mapping bottleneck features to `(q̂, r̂)`. The learned
//! networks implement them in eval mode; the oracles implement them from
//! ground truth.

mod checkpoint;
mod denoiser;
mod embedding;
mod head;
mod oracle;

pub use checkpoint::{load_checkpoint, load_checkpoint_expecting, save_checkpoint, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use denoiser::{DenoiserConfig, DenoiserModel};
pub use embedding::{embed_timestep, EMBED_DIM};
pub use head::{HeadConfig, QualityHead};
pub use oracle::{make_oracle_denoiser, make_oracle_quality, OracleDenoiser, OracleQuality};

use crate::error::Result;
use crate::nn::FeatureMap;
use crate::pattern::Pattern;

/// Bottleneck features as exchanged between a denoiser and a quality head.
pub type Bottleneck = FeatureMap<f64>;

pub trait Denoiser: Sync {
    /// Predict the clean pattern from `(x_t, x, t)`.
    fn denoise(&self, x_t: &Pattern, x: &Pattern, t: usize) -> Result<(Pattern, Bottleneck)>;

    /// Bottleneck only; implementations may skip the decoder.
    fn encode(&self, x_t: &Pattern, x: &Pattern, t: usize) -> Result<Bottleneck> {
        Ok(self.denoise(x_t, x, t)?.1)
    }
}

pub trait QualityAssessor: Sync {
    /// `(q̂, r̂)` for the forward pass that produced `bottleneck` on input `(·, x, t)`.
    fn assess(&self, bottleneck: &Bottleneck, x: &Pattern, t: usize) -> Result<(f64, f64)>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn denoise(&self, x_t: &Pattern, x: &Pattern, t: usize) -> Result<(Pattern, Bottleneck)> {
        (**self).denoise(x_t, x, t)
    }

    fn encode(&self, x_t: &Pattern, x: &Pattern, t: usize) -> Result<Bottleneck> {
        (**self).encode(x_t, x, t)
    }
}

impl<Q: QualityAssessor + ?Sized> QualityAssessor for &Q {
    fn assess(&self, bottleneck: &Bottleneck, x: &Pattern, t: usize) -> Result<(f64, f64)> {
        (**self).assess(bottleneck, x, t)
    }
}
