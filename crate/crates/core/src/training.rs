//! Two-stage training: the denoiser first, then the quality head on top of the
//! frozen encoder.
//!
//! Every random decision is keyed by `(seed, stage, epoch, position)`, and
//! per-sample gradients are summed in batch order, so results do not depend on
//! the execution policy or the thread count.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{invalid_config, invalid_input, Error, Result};
use crate::exec::{try_map_indexed, ExecPolicy};
use crate::model::{DenoiserModel, QualityHead};
use crate::nn::{AdamW, AdamWConfig, Real};
use crate::pattern::Pattern;
use crate::rng::{derive_seed, stream_rng};
use crate::schedule::{extended_denoise_mix, forward_corrupt, r_target, step_of_quality, ScheduleConfig};
use crate::synth::{generate_pure_noise, Sample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub mixup_prob: f64,
    pub mixup_max_weight: f64,
    pub noise_only_rate: f64,
    pub seed: u64,
    pub exec: ExecPolicy,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 96,
            lr_max: 1e-3,
            lr_min: 1e-7,
            batch_size: 4,
            optimizer: AdamWConfig::default(),
            mixup_prob: 0.25,
            mixup_max_weight: 0.25,
            noise_only_rate: 0.1,
            seed: 0,
            exec: ExecPolicy::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid_config("epochs and batch size must be positive"));
        }
        if !(self.lr_min > 0.0 && self.lr_min < self.lr_max && self.lr_max.is_finite()) {
            return Err(invalid_config(format!("need 0 < lr_min < lr_max, got {} and {}", self.lr_min, self.lr_max)));
        }
        for (name, p) in [
            ("mixup_prob", self.mixup_prob),
            ("mixup_max_weight", self.mixup_max_weight),
            ("noise_only_rate", self.noise_only_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(invalid_config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch > cfg.epochs {
        return Err(invalid_input(format!("epoch {epoch} outside [0, {}]", cfg.epochs)));
    }
    let phase = std::f64::consts::PI * epoch as f64 / cfg.epochs as f64;
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + phase.cos()))
}

/// `(1 - w) a + w b` on both patterns and on `q`. The mixture counts as noise
/// only when both parts are noise.
pub fn mixup(a: &Sample, b: &Sample, weight: f64, cfg: &TrainConfig) -> Result<Sample> {
    if !(0.0..=cfg.mixup_max_weight).contains(&weight) {
        return Err(invalid_input(format!("mixup weight {weight} outside [0, {}]", cfg.mixup_max_weight)));
    }
    Ok(Sample {
        x0: a.x0.lincomb(1.0 - weight, &b.x0, weight)?,
        x: a.x.lincomb(1.0 - weight, &b.x, weight)?,
        q: (1.0 - weight) * a.q + weight * b.q,
        is_noise: a.is_noise && b.is_noise,
    })
}

/// One line of the training metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

pub fn write_metrics_jsonl<W: Write>(metrics: &[EpochMetrics], mut w: W) -> Result<()> {
    for m in metrics {
        serde_json::to_writer(&mut w, m).map_err(|e| Error::Internal(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

const DENOISER_STAGE: u64 = 1;
const HEAD_STAGE: u64 = 2;

fn sample_seed(cfg: &TrainConfig, stage: u64, epoch: usize, position: usize) -> u64 {
    derive_seed(cfg.seed, &[stage, epoch as u64, position as u64])
}

fn epoch_order(cfg: &TrainConfig, stage: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream_rng(derive_seed(cfg.seed, &[stage, epoch as u64]), 7));
    order
}

/// A fully resolved denoiser training example.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserExample {
    pub sample: Sample,
    pub t: usize,
    pub x_t: Pattern,
}

/// Build the example at `position` of `epoch`, where `index` is the dataset
/// sample drawn there. Augmentations use stream 0 of the per-sample seed, the
/// step `t` uses stream 1, and the forward corruption uses a derived seed, so
/// disabling augmentation leaves the plain pipeline's draws unchanged.
pub fn denoiser_example(
    dataset: &Dataset,
    index: usize,
    epoch: usize,
    position: usize,
    cfg: &TrainConfig,
    sched: &ScheduleConfig,
) -> Result<DenoiserExample> {
    let seed = sample_seed(cfg, DENOISER_STAGE, epoch, position);
    let mut aug = stream_rng(seed, 0);
    let mut sample = dataset.samples[index].clone();
    if cfg.noise_only_rate > 0.0 && aug.random_bool(cfg.noise_only_rate) {
        sample = generate_pure_noise(dataset.height, derive_seed(seed, &[2]))?;
    }
    if cfg.mixup_prob > 0.0 && aug.random_bool(cfg.mixup_prob) {
        let partner = &dataset.samples[aug.random_range(0..dataset.len())];
        let w = aug.random_range(0.0..=cfg.mixup_max_weight);
        sample = mixup(&sample, partner, w, cfg)?;
    }
    let t = stream_rng(seed, 1).random_range(0..=sched.steps);
    let x_t = forward_corrupt(&sample.x0, &sample.x, sample.q, t, sched, derive_seed(seed, &[1]))?;
    Ok(DenoiserExample { sample, t, x_t })
}

fn check_dataset(dataset: &Dataset, size: usize) -> Result<()> {
    if dataset.is_empty() {
        return Err(invalid_input("training set is empty"));
    }
    if dataset.height != size || dataset.width != size {
        return Err(invalid_input(format!(
            "dataset is {}x{} but the model expects {size}x{size}",
            dataset.height, dataset.width
        )));
    }
    Ok(())
}

/// Sum per-sample gradients in order and divide by the batch size.
fn mean_grads<F: Real>(per_sample: &[(f64, Vec<F>)]) -> Vec<F> {
    let n = per_sample[0].1.len();
    let mut acc = vec![0.0f64; n];
    for (_, g) in per_sample {
        for (a, v) in acc.iter_mut().zip(g) {
            *a += v.f64();
        }
    }
    let inv = 1.0 / per_sample.len() as f64;
    acc.into_iter().map(|a| F::of(a * inv)).collect()
}

/// Mean loss and mean gradient of the denoiser over `examples`.
pub fn denoiser_batch_grad<F: Real>(
    model: &DenoiserModel<F>,
    examples: &[DenoiserExample],
    policy: ExecPolicy,
) -> Result<(f64, Vec<F>)> {
    if examples.is_empty() {
        return Err(invalid_input("empty batch"));
    }
    let per = try_map_indexed(policy, examples.len(), |i| {
        let e = &examples[i];
        model.loss_and_grad(&e.x_t, &e.sample.x, e.t, &e.sample.x0)
    })?;
    let loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
    Ok((loss, mean_grads(&per)))
}

/// Stage 1: train the denoiser with L1 loss on the clean pattern.
/// Returns one metrics entry per epoch.
pub fn train_denoiser<F: Real>(
    dataset: &Dataset,
    model: &mut DenoiserModel<F>,
    cfg: &TrainConfig,
    sched: &ScheduleConfig,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    sched.validate()?;
    check_dataset(dataset, model.config().size)?;
    let mut opt = AdamW::new(cfg.optimizer.clone(), model.num_params());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg)?;
        let order = epoch_order(cfg, DENOISER_STAGE, epoch, dataset.len());
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let base = b * cfg.batch_size;
            let examples = try_map_indexed(cfg.exec, chunk.len(), |i| {
                denoiser_example(dataset, chunk[i], epoch, base + i, cfg, sched)
            })?;
            let (loss, grads) = denoiser_batch_grad(model, &examples, cfg.exec)?;
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure { stage: "denoiser", epoch });
            }
            total += loss * chunk.len() as f64;
            opt.step(model.params_mut(), &grads, lr);
        }
        history.push(EpochMetrics {
            stage: "denoiser".into(),
            epoch,
            mean_loss: total / dataset.len() as f64,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    Ok(history)
}

/// A resolved head training example: the encoder is queried at `t_rand`, while
/// the progress target comes from the construction step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadExample {
    pub x_t: Pattern,
    pub t: usize,
    pub t_rand: usize,
    pub targets: (f64, f64),
    pub dropout_seed: u64,
}

/// `t ~ U{0..T}`, `x_t` from the cached one-shot estimate, target
/// `(q, r(t))`, and an independent `t_rand ~ U{0..T}` for the forward pass.
pub fn head_example(
    sample: &Sample,
    estimate: &Pattern,
    epoch: usize,
    position: usize,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<HeadExample> {
    let seed = sample_seed(cfg, HEAD_STAGE, epoch, position);
    let mut rng = stream_rng(seed, 0);
    let t_x = step_of_quality(sample.q, steps)?;
    let t = rng.random_range(0..=steps);
    let x_t = extended_denoise_mix(estimate, &sample.x, t, t_x, steps)?;
    let targets = (sample.q, r_target(t, steps, sample.is_noise)?);
    let t_rand = rng.random_range(0..=steps);
    Ok(HeadExample { x_t, t, t_rand, targets, dropout_seed: derive_seed(seed, &[3]) })
}

/// Stage 2: train the quality head on bottleneck features of the frozen
/// denoiser. Only head parameters change.
pub fn train_quality_head<F: Real>(
    dataset: &Dataset,
    frozen: &DenoiserModel<F>,
    head: &mut QualityHead<F>,
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    ScheduleConfig::with_steps(steps).validate()?;
    check_dataset(dataset, frozen.config().size)?;
    if !dataset.samples.iter().any(|s| s.is_noise) {
        return Err(invalid_input("quality-head training needs noise samples"));
    }
    let checksum = frozen.checksum();
    let estimates = try_map_indexed(cfg.exec, dataset.len(), |i| {
        let s = &dataset.samples[i];
        let t_x = step_of_quality(s.q, steps)?;
        Ok::<_, Error>(frozen.predict(&s.x, &s.x, t_x)?.0)
    })?;

    let mut opt = AdamW::new(cfg.optimizer.clone(), head.num_params());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let lr = lr_at(epoch, cfg)?;
        let order = epoch_order(cfg, HEAD_STAGE, epoch, dataset.len());
        let mut total = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let base = b * cfg.batch_size;
            let h: &QualityHead<F> = head;
            let per = try_map_indexed(cfg.exec, chunk.len(), |i| {
                let k = chunk[i];
                let e = head_example(&dataset.samples[k], &estimates[k], epoch, base + i, cfg, steps)?;
                let features = frozen.bottleneck(&e.x_t, &dataset.samples[k].x, e.t_rand)?;
                h.loss_and_grad(&features, e.targets, Some(e.dropout_seed))
            })?;
            let loss = per.iter().map(|p| p.0).sum::<f64>() / per.len() as f64;
            let grads = mean_grads(&per);
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingFailure { stage: "quality", epoch });
            }
            total += loss * chunk.len() as f64;
            opt.step(head.params_mut(), &grads, lr);
        }
        history.push(EpochMetrics {
            stage: "quality".into(),
            epoch,
            mean_loss: total / dataset.len() as f64,
            lr,
            wall_ms: start.elapsed().as_millis() as u64,
        });
    }
    if frozen.checksum() != checksum {
        return Err(Error::Internal("frozen denoiser parameters changed during head training".into()));
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_dataset, DatasetConfig};
    use crate::model::{DenoiserConfig, HeadConfig};

    fn tiny_data() -> Dataset {
        build_dataset(&DatasetConfig { train: 12, val: 1, test: 1, size: 32, noise_frac: 0.25, ..Default::default() }, 9)
            .unwrap()
    }

    fn tiny_model() -> DenoiserModel<f32> {
        DenoiserModel::new(DenoiserConfig { size: 32, width: 4, depth: 3, time_hidden: 8 }, 1).unwrap()
    }

    fn quick(epochs: usize) -> TrainConfig {
        TrainConfig { epochs, seed: 3, ..TrainConfig::default() }
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert!((lr_at(0, &cfg).unwrap() - 1e-3).abs() < 1e-15);
        assert!((lr_at(96, &cfg).unwrap() - 1e-7).abs() < 1e-15);
        assert!((lr_at(48, &cfg).unwrap() - 5.0005e-4).abs() < 1e-9);
        assert!(lr_at(97, &cfg).is_err());
    }

    #[test]
    fn mixup_examples() {
        let cfg = TrainConfig::default();
        let ds = tiny_data();
        let real: Vec<&Sample> = ds.samples.iter().filter(|s| !s.is_noise).collect();
        let noise: Vec<&Sample> = ds.samples.iter().filter(|s| s.is_noise).collect();
        assert_eq!(&mixup(real[0], real[1], 0.0, &cfg).unwrap(), real[0]);
        let mut a = real[0].clone();
        let mut b = real[1].clone();
        a.q = 0.8;
        b.q = 0.4;
        assert!((mixup(&a, &b, 0.25, &cfg).unwrap().q - 0.7).abs() < 1e-12);
        let nn = mixup(noise[0], noise[1], 0.2, &cfg).unwrap();
        assert!(nn.is_noise && nn.q == 0.0);
        assert!(!mixup(noise[0], real[0], 0.2, &cfg).unwrap().is_noise);
        assert!(mixup(real[0], real[1], 0.3, &cfg).is_err());
    }

    #[test]
    fn plain_pipeline_when_augmentations_disabled() {
        let ds = tiny_data();
        let sched = ScheduleConfig::with_steps(32);
        let cfg = TrainConfig { noise_only_rate: 0.0, mixup_prob: 0.0, ..quick(1) };
        for pos in 0..ds.len() {
            let e = denoiser_example(&ds, pos, 0, pos, &cfg, &sched).unwrap();
            let seed = sample_seed(&cfg, DENOISER_STAGE, 0, pos);
            let t = stream_rng(seed, 1).random_range(0..=32);
            let s = &ds.samples[pos];
            let x_t = forward_corrupt(&s.x0, &s.x, s.q, t, &sched, derive_seed(seed, &[1])).unwrap();
            assert_eq!(e.t, t);
            assert_eq!(&e.sample, s);
            assert_eq!(e.x_t, x_t);
        }
        let with_aug = TrainConfig { noise_only_rate: 1.0, ..cfg.clone() };
        let e = denoiser_example(&ds, 0, 0, 0, &with_aug, &sched).unwrap();
        assert!(e.sample.is_noise && e.sample.x0.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_step_decreases_batch_loss() {
        let ds = tiny_data();
        let sched = ScheduleConfig::with_steps(32);
        let cfg = quick(1);
        let mut model = tiny_model();
        let batch: Vec<_> = (0..4).map(|i| denoiser_example(&ds, i, 0, i, &cfg, &sched).unwrap()).collect();
        // The zero-initialised output layer sits exactly on the L1 kink for
        // background pixels, so move off it first.
        let mut warm = AdamW::new(AdamWConfig::default(), model.num_params());
        for _ in 0..5 {
            let (_, g) = denoiser_batch_grad(&model, &batch, ExecPolicy::Sequential).unwrap();
            warm.step(model.params_mut(), &g, 1e-3);
        }
        let (before, grads) = denoiser_batch_grad(&model, &batch, ExecPolicy::Sequential).unwrap();
        let mut opt = AdamW::new(AdamWConfig::default(), model.num_params());
        opt.step(model.params_mut(), &grads, 1e-4);
        let (after, _) = denoiser_batch_grad(&model, &batch, ExecPolicy::Sequential).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn denoiser_training_is_deterministic_across_policies() {
        let ds = tiny_data();
        let sched = ScheduleConfig::with_steps(32);
        let run = |exec| {
            let mut m = tiny_model();
            let h = train_denoiser(&ds, &mut m, &TrainConfig { exec, ..quick(3) }, &sched).unwrap();
            (h.iter().map(|e| e.mean_loss).collect::<Vec<_>>(), m.checksum())
        };
        let a = run(ExecPolicy::Sequential);
        let b = run(ExecPolicy::Parallel);
        assert_eq!(a.0.len(), 3);
        assert_eq!(a, b);
    }

    #[test]
    fn head_training_keeps_denoiser_frozen() {
        let ds = tiny_data();
        let model = tiny_model();
        let before = model.checksum();
        let c = model.config().clone();
        let mut head = QualityHead::new(HeadConfig::for_bottleneck(c.bottleneck_channels(), c.bottleneck_side()), 4).unwrap();
        let h0 = head.checksum();
        let hist = train_quality_head(&ds, &model, &mut head, &quick(2), 32).unwrap();
        assert_eq!(hist.len(), 2);
        assert_eq!(model.checksum(), before);
        assert_ne!(head.checksum(), h0);
    }

    #[test]
    fn head_targets_use_construction_step() {
        let ds = tiny_data();
        let cfg = quick(1);
        let s = ds.samples.iter().find(|s| !s.is_noise).unwrap();
        let mut mismatched = 0;
        for pos in 0..50 {
            let e = head_example(s, &s.x0, 0, pos, &cfg, 64).unwrap();
            assert!((e.targets.1 - (1.0 - e.t as f64 / 64.0)).abs() < 1e-12);
            assert_eq!(e.targets.0, s.q);
            mismatched += usize::from(e.t != e.t_rand);
        }
        assert!(mismatched > 40);
        let n = ds.samples.iter().find(|s| s.is_noise).unwrap();
        assert_eq!(head_example(n, &n.x0, 0, 0, &cfg, 64).unwrap().targets, (0.0, 0.0));
    }

    #[test]
    fn metrics_log_lines_parse() {
        let m = EpochMetrics { stage: "denoiser".into(), epoch: 0, mean_loss: 0.5, lr: 1e-3, wall_ms: 3 };
        let mut buf = Vec::new();
        write_metrics_jsonl(&[m.clone(), m], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            for k in ["stage", "epoch", "mean_loss", "lr", "wall_ms"] {
                assert!(v.get(k).is_some());
            }
        }
    }
}
