//! Closed-form schedule arithmetic shared by training and inference.
//!
//! Steps are integers in `[0, T]`; step 0 is the clean pattern and larger
//! steps are progressively more corrupted. An observation of quality `q` sits
//! at step `t_x = T (1 - q)`, and the forward process interpolates between
//! the clean master (`t = 0`) and the observation (`t = t_x`), extrapolating
//! past the observation for `t > t_x`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Result};
use crate::pattern::{minmax01_normalize, zscore_normalize, Pattern};
use crate::rng::stream_rng;

pub const DEFAULT_STEPS: usize = 384;
pub const DEFAULT_NOISE_SCALE: f64 = 0.5;
pub const DEFAULT_NOISE_PROB: f64 = 0.5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    /// Total diffusion steps `T`.
    pub steps: usize,
    /// Scale of the extra Gaussian corruption, `s_noise`.
    pub noise_scale: f64,
    /// Probability that extra corruption is applied at all, `p_noise`.
    pub noise_prob: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            steps: DEFAULT_STEPS,
            noise_scale: DEFAULT_NOISE_SCALE,
            noise_prob: DEFAULT_NOISE_PROB,
        }
    }
}

impl ScheduleConfig {
    pub fn with_steps(steps: usize) -> Self {
        ScheduleConfig { steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 2 {
            return Err(invalid_config("T must be at least 2"));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(invalid_config("s_noise must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.noise_prob) {
            return Err(invalid_config("p_noise must lie in [0, 1]"));
        }
        Ok(())
    }
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(invalid_input(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

fn check_step(t: usize, steps: usize) -> Result<()> {
    if t > steps {
        return Err(invalid_input(format!("step {t} outside [0, {steps}]")));
    }
    Ok(())
}

/// Observation step of a pattern with quality `q`: `round(T (1 - q))` clamped to `[1, T]`.
pub fn step_of_quality(q: f64, steps: usize) -> Result<usize> {
    check_unit("quality", q)?;
    let t = (steps as f64 * (1.0 - q)).round() as usize;
    Ok(t.clamp(1, steps))
}

/// Next step from predicted progress: `round(T (1 - r))` clamped to `[0, T]`.
/// Zero means the loop is done.
pub fn next_step_from_progress(r_hat: f64, steps: usize) -> Result<usize> {
    check_unit("progress", r_hat)?;
    Ok(((steps as f64 * (1.0 - r_hat)).round() as usize).min(steps))
}

/// Progress target: `1 - t/T` for genuine patterns, 0 for pure noise.
pub fn r_target(t: usize, steps: usize, is_noise: bool) -> Result<f64> {
    check_step(t, steps)?;
    if is_noise {
        return Ok(0.0);
    }
    Ok(1.0 - t as f64 / steps as f64)
}

/// Mixing coefficients of one forward-corruption draw.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorruptionState {
    pub t: usize,
    pub t_x: usize,
    /// Weight on the observation, `t / t_x`; exceeds 1 past the observation.
    pub alpha: f64,
    /// Extra-noise amplitude, `m s_noise t / T`.
    pub beta: f64,
    /// Whether extra noise is applied.
    pub m: bool,
}

impl CorruptionState {
    pub fn new(t: usize, t_x: usize, m: bool, cfg: &ScheduleConfig) -> Result<Self> {
        cfg.validate()?;
        check_step(t, cfg.steps)?;
        if t_x == 0 || t_x > cfg.steps {
            return Err(invalid_input(format!("observation step {t_x} outside [1, {}]", cfg.steps)));
        }
        let beta = if m {
            cfg.noise_scale * t as f64 / cfg.steps as f64
        } else {
            0.0
        };
        Ok(CorruptionState {
            t,
            t_x,
            alpha: t as f64 / t_x as f64,
            beta,
            m,
        })
    }

    /// Draw `m ~ Bernoulli(p_noise)` from stream 0 of `seed`.
    pub fn draw(q: f64, t: usize, cfg: &ScheduleConfig, seed: u64) -> Result<Self> {
        let t_x = step_of_quality(q, cfg.steps)?;
        let m = stream_rng(seed, 0).random_bool(cfg.noise_prob);
        Self::new(t, t_x, m, cfg)
    }
}

/// `zscore((1 - α) x0 + α x + β ω)`, with `ω ~ N(0, I)` drawn from stream 1 of `seed`.
pub fn apply_corruption(x0: &Pattern, x: &Pattern, state: &CorruptionState, seed: u64) -> Result<Pattern> {
    let mut xt = x0.lincomb(1.0 - state.alpha, x, state.alpha)?;
    if state.beta > 0.0 {
        let mut rng = stream_rng(seed, 1);
        for v in xt.pixels_mut() {
            let w: f64 = StandardNormal.sample(&mut rng);
            *v += state.beta * w;
        }
    }
    zscore_normalize(&xt)
}

/// Forward corruption of a training pair at step `t`.
pub fn forward_corrupt(
    x0: &Pattern,
    x: &Pattern,
    q: f64,
    t: usize,
    cfg: &ScheduleConfig,
    seed: u64,
) -> Result<Pattern> {
    let state = CorruptionState::draw(q, t, cfg, seed)?;
    apply_corruption(x0, x, &state, seed)
}

/// Interpolation between a denoiser estimate and the observation, rescaled to
/// `[0, 1]`: `minmax01((1 - t/t_x) xhat0 + (t/t_x) x)`.
pub fn partial_denoise_mix(xhat0: &Pattern, x: &Pattern, t: usize, t_x: usize) -> Result<Pattern> {
    if t_x == 0 {
        return Err(invalid_input("observation step must be at least 1"));
    }
    if t > t_x {
        return Err(invalid_input(format!("step {t} beyond observation step {t_x}")));
    }
    let a = t as f64 / t_x as f64;
    minmax01_normalize(&xhat0.lincomb(1.0 - a, x, a)?)
}

/// Same mix for any `t` in `[0, T]`. Steps past `t_x` extrapolate beyond the
/// observation, giving states more degraded than `x`.
pub fn extended_denoise_mix(xhat0: &Pattern, x: &Pattern, t: usize, t_x: usize, steps: usize) -> Result<Pattern> {
    check_step(t, steps)?;
    if t <= t_x {
        return partial_denoise_mix(xhat0, x, t, t_x);
    }
    let a = t as f64 / t_x as f64;
    minmax01_normalize(&xhat0.lincomb(1.0 - a, x, a)?)
}

/// One feedback-loop update, `x_t + (xhat0 - x) / T`, before renormalization.
pub fn residual_update(x_t: &Pattern, xhat0: &Pattern, x: &Pattern, steps: usize) -> Result<Pattern> {
    x_t.ensure_same_shape(xhat0)?;
    x_t.ensure_same_shape(x)?;
    if steps == 0 {
        return Err(invalid_input("T must be positive"));
    }
    let inv = 1.0 / steps as f64;
    let mut out = x_t.clone();
    for ((o, &h), &obs) in out.pixels_mut().iter_mut().zip(xhat0.pixels()).zip(x.pixels()) {
        *o += inv * (h - obs);
    }
    Ok(out)
}
