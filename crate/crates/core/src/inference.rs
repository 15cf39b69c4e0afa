//! Adaptive feedback denoising and the fixed-schedule and one-step baselines.
//!
//! The loop keeps `x_t` in unnormalized form and rescales it to `[0, 1]` only
//! when it is handed to the denoiser. Every variant reports a [`DenoiseTrace`].

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::exec::{try_map_indexed, ExecPolicy};
use crate::model::{Denoiser, QualityAssessor};
use crate::pattern::{minmax01_normalize, Pattern};
use crate::schedule::{next_step_from_progress, residual_update};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceConfig {
    pub steps: usize,
    /// Desired final progress `R`; the loop stops once `r̂ ≥ R`.
    pub target_progress: f64,
    pub hallucination_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { steps: 384, target_progress: 1.0, hallucination_threshold: 0.1 }
    }
}

impl InferenceConfig {
    pub fn with_steps(steps: usize) -> Self {
        InferenceConfig { steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(invalid_config("T must be positive"));
        }
        if !(0.0..=1.0).contains(&self.target_progress) {
            return Err(invalid_config(format!("R = {} outside [0, 1]", self.target_progress)));
        }
        let h = self.hallucination_threshold;
        if !(h > 0.0 && h < 1.0) {
            return Err(invalid_config(format!("hallucination threshold {h} outside (0, 1)")));
        }
        Ok(())
    }
}

/// One loop iteration. `t_x` is the step the model was queried at; `q_hat`
/// and `r_hat` are absent when no head was consulted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceStep {
    pub n: usize,
    pub t_x: usize,
    pub q_hat: Option<f64>,
    pub r_hat: Option<f64>,
    /// SHA-256 of the unnormalized `x_t` after this iteration's update.
    pub xt_digest: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DenoiseTrace {
    pub iterations: Vec<TraceStep>,
    pub q_hat_init: Option<f64>,
    pub r_hat_init: Option<f64>,
    /// Index into `iterations` of the returned state; `None` when the input was returned as is.
    pub best_iteration: Option<usize>,
    pub flagged_noise: bool,
}

#[derive(Serialize)]
struct TraceSummary {
    best_iteration: Option<usize>,
    flagged_noise: bool,
    q_hat_init: Option<f64>,
    r_hat_init: Option<f64>,
}

impl DenoiseTrace {
    /// Maximum `r̂` over the iterations that consulted the head.
    pub fn max_r_hat(&self) -> Option<f64> {
        self.iterations.iter().filter_map(|s| s.r_hat).reduce(f64::max)
    }

    /// Score used for noise detection: max `r̂` over the loop, or the dry-run
    /// value when the loop never ran.
    pub fn noise_score(&self) -> Option<f64> {
        self.max_r_hat().or(self.r_hat_init)
    }

    /// JSON lines: one object per iteration, then a summary object.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.iterations {
            serde_json::to_writer(&mut w, s).map_err(|e| Error::Internal(e.to_string()))?;
            w.write_all(b"\n")?;
        }
        let summary = TraceSummary {
            best_iteration: self.best_iteration,
            flagged_noise: self.flagged_noise,
            q_hat_init: self.q_hat_init,
            r_hat_init: self.r_hat_init,
        };
        serde_json::to_writer(&mut w, &summary).map_err(|e| Error::Internal(e.to_string()))?;
        w.write_all(b"\n")?;
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }
}

/// True iff the maximum `r̂` in the trace is strictly below `threshold`.
pub fn classify_noise(trace: &DenoiseTrace, threshold: f64) -> Result<bool> {
    match trace.max_r_hat() {
        Some(m) => Ok(m < threshold),
        None => Err(invalid_input("trace has no assessed iterations")),
    }
}

/// Dry run at `t = T` on `(x, x)`: returns `(q̂_init, r̂_init, t_x)`.
pub fn estimate_start<D: Denoiser, Q: QualityAssessor>(
    model: &D,
    head: &Q,
    x: &Pattern,
    steps: usize,
) -> Result<(f64, f64, usize)> {
    let b = model.encode(x, x, steps)?;
    let (q, r) = head.assess(&b, x, steps)?;
    if !q.is_finite() || !r.is_finite() {
        return Err(Error::InferenceFailure {
            message: "non-finite head output in dry run".into(),
            trace: Box::default(),
        });
    }
    let t_x = next_step_from_progress(q.clamp(0.0, 1.0), steps)?;
    Ok((q, r, t_x))
}

/// Switches for the progressive ablation. All on is the full feedback method.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoopOptions {
    /// Start from the dry-run estimate of `t_x` instead of `T`.
    pub start_estimate: bool,
    /// Pick the next step from `r̂` instead of decrementing by one.
    pub dynamic_step: bool,
    /// Return the state with the highest `r̂` instead of the last one.
    pub best_step: bool,
    /// Keep every unnormalized `x_t` in the result.
    pub keep_states: bool,
}

impl LoopOptions {
    pub const BASELINE: LoopOptions =
        LoopOptions { start_estimate: false, dynamic_step: false, best_step: false, keep_states: false };
    pub const START_STEP: LoopOptions = LoopOptions { start_estimate: true, ..Self::BASELINE };
    pub const DYNAMIC_STEP: LoopOptions = LoopOptions { dynamic_step: true, ..Self::START_STEP };
    pub const FULL: LoopOptions = LoopOptions { best_step: true, ..Self::DYNAMIC_STEP };

    fn needs_head(&self) -> bool {
        self.start_estimate || self.dynamic_step || self.best_step
    }

    fn consults_head(&self) -> bool {
        self.dynamic_step || self.best_step
    }
}

#[derive(Clone, Debug)]
pub struct LoopOutput {
    /// Selected `x_t`, unnormalized.
    pub output: Pattern,
    pub trace: DenoiseTrace,
    /// Unnormalized `x_t` after each iteration, when requested.
    pub states: Vec<Pattern>,
}

fn failure(message: impl Into<String>, trace: &DenoiseTrace) -> Error {
    Error::InferenceFailure { message: message.into(), trace: Box::new(trace.clone()) }
}

/// The denoising loop with each adaptive component switchable.
pub fn denoise_adaptive<D: Denoiser, Q: QualityAssessor>(
    model: &D,
    head: Option<&Q>,
    x: &Pattern,
    cfg: &InferenceConfig,
    opts: LoopOptions,
) -> Result<LoopOutput> {
    cfg.validate()?;
    if !x.is_finite() {
        return Err(invalid_input("observation contains non-finite values"));
    }
    let head = match head {
        Some(h) => Some(h),
        None if opts.needs_head() => return Err(invalid_config("this procedure requires a quality head")),
        None => None,
    };
    let steps = cfg.steps;
    let mut trace = DenoiseTrace::default();
    let mut t_x = steps;
    let mut r_hat = 0.0;
    if opts.start_estimate {
        let h = head.expect("checked above");
        let (q0, r0, t0) = estimate_start(model, h, x, steps)?;
        trace.q_hat_init = Some(q0);
        trace.r_hat_init = Some(r0);
        t_x = t0;
        r_hat = r0;
    }

    let mut x_t = x.clone();
    let mut best: Option<(usize, f64, Pattern)> = None;
    let mut states = Vec::new();
    let mut n = 0;
    while n < steps && t_x > 0 && (!opts.consults_head() || r_hat < cfg.target_progress) {
        let input = minmax01_normalize(&x_t).map_err(|e| failure(e.to_string(), &trace))?;
        let (xhat0, bottleneck) = model.denoise(&input, x, t_x)?;
        if !xhat0.is_finite() {
            return Err(failure(format!("non-finite prediction at step {t_x}"), &trace));
        }
        let assessed = match head {
            Some(h) if opts.consults_head() => {
                let (q, r) = h.assess(&bottleneck, x, t_x)?;
                if !q.is_finite() || !r.is_finite() {
                    return Err(failure(format!("non-finite head output at step {t_x}"), &trace));
                }
                Some((q, r))
            }
            _ => None,
        };
        x_t = residual_update(&x_t, &xhat0, x, steps)?;
        if !x_t.is_finite() {
            return Err(failure("non-finite state after update", &trace));
        }
        trace.iterations.push(TraceStep {
            n,
            t_x,
            q_hat: assessed.map(|a| a.0),
            r_hat: assessed.map(|a| a.1),
            xt_digest: x_t.digest(),
        });
        if opts.keep_states {
            states.push(x_t.clone());
        }
        if let Some((_, r)) = assessed {
            r_hat = r;
            if opts.best_step && best.as_ref().is_none_or(|b| r > b.1) {
                best = Some((n, r, x_t.clone()));
            }
        }
        t_x = if opts.dynamic_step {
            next_step_from_progress(r_hat.clamp(0.0, 1.0), steps)?
        } else {
            t_x - 1
        };
        n += 1;
    }

    let output = match best {
        Some((i, _, state)) => {
            trace.best_iteration = Some(i);
            state
        }
        None => {
            trace.best_iteration = trace.iterations.len().checked_sub(1);
            x_t
        }
    };
    trace.flagged_noise = match trace.noise_score() {
        Some(s) if opts.consults_head() || opts.start_estimate => s < cfg.hallucination_threshold,
        _ => false,
    };
    Ok(LoopOutput { output, trace, states })
}

/// Full feedback method: dry-run start, dynamic step, best-step output.
pub fn denoise_with_feedback<D: Denoiser, Q: QualityAssessor>(
    model: &D,
    head: &Q,
    x: &Pattern,
    cfg: &InferenceConfig,
) -> Result<(Pattern, DenoiseTrace)> {
    let out = denoise_adaptive(model, Some(head), x, cfg, LoopOptions::FULL)?;
    Ok((out.output, out.trace))
}

/// Linear schedule from `t = T` down to 1 with no head; returns the last state.
pub fn denoise_fixed_schedule<D: Denoiser>(model: &D, x: &Pattern, steps: usize) -> Result<(Pattern, DenoiseTrace)> {
    let out = denoise_adaptive::<D, NoHead>(model, None, x, &InferenceConfig::with_steps(steps), LoopOptions::BASELINE)?;
    Ok((out.output, out.trace))
}

/// Direct prediction `f(x, x, t)` with `t = T`, or `t = t_x` from the dry run.
pub fn denoise_one_step<D: Denoiser, Q: QualityAssessor>(
    model: &D,
    x: &Pattern,
    steps: usize,
    use_tx_assessment: bool,
    head: Option<&Q>,
) -> Result<(Pattern, DenoiseTrace)> {
    let mut trace = DenoiseTrace::default();
    let t = if use_tx_assessment {
        let h = head.ok_or_else(|| invalid_config("t_x assessment requires a quality head"))?;
        let (q, r, t_x) = estimate_start(model, h, x, steps)?;
        trace.q_hat_init = Some(q);
        trace.r_hat_init = Some(r);
        trace.flagged_noise = r < InferenceConfig::default().hallucination_threshold;
        t_x
    } else {
        steps
    };
    let (xhat0, _) = model.denoise(x, x, t)?;
    if !xhat0.is_finite() {
        return Err(failure("non-finite one-step prediction", &trace));
    }
    trace.iterations.push(TraceStep { n: 0, t_x: t, q_hat: None, r_hat: None, xt_digest: xhat0.digest() });
    trace.best_iteration = Some(0);
    Ok((xhat0, trace))
}

/// Placeholder head type for head-less calls.
pub enum NoHead {}

impl QualityAssessor for NoHead {
    fn assess(&self, _: &crate::model::Bottleneck, _: &Pattern, _: usize) -> Result<(f64, f64)> {
        match *self {}
    }
}

/// Every restoration procedure exposed to callers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Procedure {
    OneStep,
    OneStepTx,
    Fixed,
    StartStep,
    DynamicStep,
    Feedback,
}

impl Procedure {
    pub const ABLATION: [Procedure; 4] =
        [Procedure::Fixed, Procedure::StartStep, Procedure::DynamicStep, Procedure::Feedback];

    pub fn needs_head(self) -> bool {
        !matches!(self, Procedure::OneStep | Procedure::Fixed)
    }

    pub fn label(self) -> &'static str {
        match self {
            Procedure::OneStep => "One-step",
            Procedure::OneStepTx => "One-step with t_x assessment",
            Procedure::Fixed => "Baseline",
            Procedure::StartStep => "+ start step",
            Procedure::DynamicStep => "+ dynamic step",
            Procedure::Feedback => "+ best step selection",
        }
    }

    fn loop_options(self) -> Option<LoopOptions> {
        match self {
            Procedure::Fixed => Some(LoopOptions::BASELINE),
            Procedure::StartStep => Some(LoopOptions::START_STEP),
            Procedure::DynamicStep => Some(LoopOptions::DYNAMIC_STEP),
            Procedure::Feedback => Some(LoopOptions::FULL),
            Procedure::OneStep | Procedure::OneStepTx => None,
        }
    }
}

/// Run `procedure` on one pattern; the returned pattern is rescaled to `[0, 1]`.
pub fn restore<D: Denoiser, Q: QualityAssessor>(
    model: &D,
    head: Option<&Q>,
    x: &Pattern,
    cfg: &InferenceConfig,
    procedure: Procedure,
) -> Result<(Pattern, DenoiseTrace)> {
    let (raw, trace) = match procedure.loop_options() {
        Some(opts) => {
            let out = denoise_adaptive(model, head, x, cfg, opts)?;
            (out.output, out.trace)
        }
        None => denoise_one_step(model, x, cfg.steps, procedure == Procedure::OneStepTx, head)?,
    };
    Ok((minmax01_normalize(&raw)?, trace))
}

/// [`restore`] over many patterns, one independent loop per pattern.
pub fn restore_batch<D: Denoiser, Q: QualityAssessor>(
    model: &D,
    head: Option<&Q>,
    xs: &[&Pattern],
    cfg: &InferenceConfig,
    procedure: Procedure,
    policy: ExecPolicy,
) -> Result<Vec<(Pattern, DenoiseTrace)>> {
    try_map_indexed(policy, xs.len(), |i| restore(model, head, xs[i], cfg, procedure))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, Dataset, DatasetConfig};
    use crate::model::{make_oracle_denoiser, make_oracle_quality, Bottleneck};

    struct Pinned(f64, f64);

    impl QualityAssessor for Pinned {
        fn assess(&self, _: &Bottleneck, _: &Pattern, _: usize) -> Result<(f64, f64)> {
            Ok((self.0, self.1))
        }
    }

    fn data() -> Dataset {
        build_dataset(&DatasetConfig { train: 6, val: 1, test: 1, size: 32, noise_frac: 0.2, ..Default::default() }, 3)
            .unwrap()
    }

    #[test]
    fn classify_noise_examples() {
        let mk = |rs: &[f64]| DenoiseTrace {
            iterations: rs
                .iter()
                .enumerate()
                .map(|(n, &r)| TraceStep { n, t_x: 1, q_hat: Some(0.5), r_hat: Some(r), xt_digest: String::new() })
                .collect(),
            ..Default::default()
        };
        assert!(classify_noise(&mk(&[0.02, 0.04, 0.03]), 0.1).unwrap());
        assert!(!classify_noise(&mk(&[0.02, 0.9]), 0.1).unwrap());
        assert!(!classify_noise(&mk(&[0.02, 0.1]), 0.1).unwrap());
        assert!(classify_noise(&DenoiseTrace::default(), 0.1).is_err());
    }

    #[test]
    fn pinned_head_runs_to_cap_and_flags() {
        let ds = data();
        let model = make_oracle_denoiser(&ds);
        let head = Pinned(0.5, 0.05);
        let cfg = InferenceConfig::with_steps(40);
        let (_, trace) = denoise_with_feedback(&model, &head, &ds.samples[0].x, &cfg).unwrap();
        assert_eq!(trace.iterations.len(), 40);
        assert!(trace.flagged_noise);
        assert_eq!(trace.best_iteration, Some(0));
    }

    #[test]
    fn fixed_schedule_with_oracle_reaches_clean_pattern() {
        let ds = data();
        let model = make_oracle_denoiser(&ds);
        for t in [1, 17] {
            let s = &ds.samples[1];
            let (out, trace) = denoise_fixed_schedule(&model, &s.x, t).unwrap();
            assert_eq!(trace.iterations.len(), t);
            assert!(out.max_abs_diff(&s.x0).unwrap() < 1e-6);
            assert!(!trace.flagged_noise);
        }
    }

    #[test]
    fn one_step_requires_head_for_assessment() {
        let ds = data();
        let model = make_oracle_denoiser(&ds);
        let s = &ds.samples[2];
        let r = denoise_one_step::<_, NoHead>(&model, &s.x, 64, true, None);
        assert!(matches!(r, Err(Error::InvalidConfig(_))));
        let head = make_oracle_quality(&ds, 64);
        for tx in [false, true] {
            let (out, _) = denoise_one_step(&model, &s.x, 64, tx, Some(&head)).unwrap();
            assert_eq!(out, s.x0);
        }
        assert!(matches!(
            denoise_adaptive::<_, NoHead>(&model, None, &s.x, &InferenceConfig::with_steps(8), LoopOptions::FULL),
            Err(Error::InvalidConfig(_))
        ));
    }

    #[test]
    fn start_estimate_matches_oracle_quality() {
        let ds = data();
        let model = make_oracle_denoiser(&ds);
        let head = make_oracle_quality(&ds, 384);
        for s in &ds.samples {
            let (q, _, t_x) = estimate_start(&model, &head, &s.x, 384).unwrap();
            assert_eq!(q, s.q);
            assert_eq!(t_x, (384.0 * (1.0 - s.q)).round() as usize);
            if s.is_noise {
                assert_eq!(t_x, 384);
            }
        }
    }

    #[test]
    fn early_stop_at_requested_progress() {
        let ds = data();
        let model = make_oracle_denoiser(&ds);
        let head = make_oracle_quality(&ds, 64);
        let s = ds.samples.iter().find(|s| !s.is_noise).unwrap();
        let cfg = InferenceConfig { target_progress: 0.5, ..InferenceConfig::with_steps(64) };
        let (_, trace) = denoise_with_feedback(&model, &head, &s.x, &cfg).unwrap();
        let rs: Vec<f64> = trace.iterations.iter().map(|i| i.r_hat.unwrap()).collect();
        assert!(rs[..rs.len() - 1].iter().all(|&r| r < 0.5));
        assert!(*rs.last().unwrap() >= 0.5 || trace.iterations.last().unwrap().t_x == 1);
    }

    #[test]
    fn trace_jsonl_shape() {
        let ds = data();
        let model = make_oracle_denoiser(&ds);
        let head = make_oracle_quality(&ds, 16);
        let (_, trace) = denoise_with_feedback(&model, &head, &ds.samples[0].x, &InferenceConfig::with_steps(16)).unwrap();
        let text = trace.to_jsonl();
        let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), trace.iterations.len() + 1);
        assert!(lines[0].get("r_hat").is_some());
        assert!(lines.last().unwrap().get("flagged_noise").is_some());
    }
}
