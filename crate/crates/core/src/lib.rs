//! Synthetic Kikuchi pattern generation, diffusion-style denoising and a
//! quality-feedback inference loop.

pub mod dataset;
pub mod error;
pub mod exec;
pub mod inference;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pattern;
pub mod rng;
pub mod schedule;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
