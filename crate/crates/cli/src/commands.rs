use std::path::{Path, PathBuf};
use std::time::Instant;

use diffract_core::dataset::{build_dataset_file, Dataset, Split};
use diffract_core::exec::{try_map_indexed, ExecPolicy};
use diffract_core::inference::{restore_batch, DenoiseTrace, Procedure};
use diffract_core::metrics::evaluate;
use diffract_core::model::{load_checkpoint, save_checkpoint, Checkpoint, DenoiserModel, HeadConfig, QualityHead};
use diffract_core::pattern::{minmax01_normalize, Pattern};
use diffract_core::rng::derive_seed;
use diffract_core::schedule::ScheduleConfig;
use diffract_core::training::{train_denoiser, train_quality_head, write_metrics_jsonl, EpochMetrics};
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, CliResult};
use crate::manifest::{digest_path, manifest_path, record_inputs, sidecar, RunManifest, DIR_MANIFEST, TOOL_VERSION};
use crate::pgm::{quantized, read_pgm, write_pgm16};
use crate::plan::*;

const DENOISER_INIT: u64 = 0xD1;
const HEAD_INIT: u64 = 0xD2;

/// Execute `plan`, then write its manifest next to the outputs.
pub fn execute(plan: &Plan) -> CliResult<RunManifest> {
    let start = Instant::now();
    let inputs = record_inputs(&plan.inputs())?;
    let outputs = match plan {
        Plan::GenData(p) => gen_data(p)?,
        Plan::Train(p) => train(p)?,
        Plan::Denoise(p) => denoise(p)?,
        Plan::Eval(p) => eval(p)?,
        Plan::Ablate(p) => ablate(p)?,
    };
    let manifest = RunManifest {
        tool_version: TOOL_VERSION.to_string(),
        plan: plan.clone(),
        seed: plan.seed(),
        inputs,
        outputs,
        wall_ms: start.elapsed().as_millis() as u64,
    };
    manifest.write(&manifest_path(plan.output(), plan.writes_directory()))?;
    Ok(manifest)
}

/// Re-run a recorded plan after checking that its inputs are unchanged.
pub fn replay(manifest: &Path, output: Option<PathBuf>) -> CliResult<RunManifest> {
    let recorded = RunManifest::read(manifest)?;
    let current = record_inputs(&recorded.inputs.iter().map(|i| i.path.clone()).collect::<Vec<_>>())?;
    for (was, now) in recorded.inputs.iter().zip(&current) {
        if was.sha256 != now.sha256 {
            return Err(CliError::usage(format!("input {} changed since the recorded run", was.path.display())));
        }
    }
    let mut plan = recorded.plan;
    if let Some(out) = output {
        plan.set_output(out);
    }
    execute(&plan)
}

fn load_split(data: &DataRef) -> CliResult<Dataset> {
    Ok(Dataset::read(&data.path)?.subset(data.samples.clone())?)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn gen_data(p: &GenDataPlan) -> CliResult<Vec<PathBuf>> {
    let ds = build_dataset_file(&p.dataset, p.seed, &p.output)?;
    let layout = p.dataset.layout();
    println!("wrote {} samples of {}x{} to {}", ds.len(), ds.height, ds.width, p.output.display());
    for split in Split::ALL {
        let r = layout.range(split);
        let noise = ds.samples[r.clone()].iter().filter(|s| s.is_noise).count();
        println!("  {:<5} {:>6} samples ({noise} noise only)", format!("{split:?}").to_lowercase(), r.len());
    }
    Ok(vec![p.output.clone()])
}

fn train(p: &TrainPlan) -> CliResult<Vec<PathBuf>> {
    let ds = load_split(&p.data)?;
    let (ckpt, metrics) = match p.stage {
        Stage::Denoiser => {
            let cfg = p.model.clone().ok_or_else(|| CliError::usage("denoiser stage needs a model config"))?;
            let mut model = DenoiserModel::<f32>::new(cfg, derive_seed(p.train.seed, &[DENOISER_INIT]))?;
            println!("training denoiser ({} parameters) on {} samples, T = {}", model.num_params(), ds.len(), p.steps);
            let metrics = train_denoiser(&ds, &mut model, &p.train, &ScheduleConfig::with_steps(p.steps))?;
            (Checkpoint { steps: p.steps, denoiser: model, head: None }, metrics)
        }
        Stage::Quality => {
            let from = p.from.as_ref().ok_or_else(|| CliError::usage("quality stage needs --from"))?;
            let base = load_checkpoint::<f32>(from)?;
            let mc = base.denoiser.config();
            let hc = HeadConfig::for_bottleneck(mc.bottleneck_channels(), mc.bottleneck_side());
            let mut head = QualityHead::<f32>::new(hc, derive_seed(p.train.seed, &[HEAD_INIT]))?;
            println!("training quality head ({} parameters) on {} samples", head.num_params(), ds.len());
            let metrics = train_quality_head(&ds, &base.denoiser, &mut head, &p.train, base.steps)?;
            (Checkpoint { steps: base.steps, denoiser: base.denoiser, head: Some(head) }, metrics)
        }
    };
    print_epochs(&metrics);
    save_checkpoint(&ckpt, &p.output)?;
    let log = sidecar(&p.output, "metrics.jsonl");
    let mut buf = Vec::new();
    write_metrics_jsonl(&metrics, &mut buf)?;
    write_file(&log, &buf)?;
    println!("checkpoint written to {}", p.output.display());
    Ok(vec![p.output.clone(), log])
}

fn print_epochs(metrics: &[EpochMetrics]) {
    for m in metrics {
        println!("  epoch {:>3}  loss {:.5}  lr {:.3e}  {:.1}s", m.epoch + 1, m.mean_loss, m.lr, m.wall_ms as f64 / 1000.0);
    }
}

fn load_for(mode_needs_head: bool, path: &Path) -> CliResult<Checkpoint<f32>> {
    let ckpt = load_checkpoint::<f32>(path)?;
    if mode_needs_head && ckpt.head.is_none() {
        return Err(CliError::usage(format!(
            "{} holds no quality head; run train --stage quality first",
            path.display()
        )));
    }
    Ok(ckpt)
}

/// File stem of the `i`-th restored pattern.
pub fn output_stem(i: usize) -> String {
    format!("{i:05}")
}

fn denoise(p: &DenoisePlan) -> CliResult<Vec<PathBuf>> {
    let procedure = p.mode.procedure();
    let ckpt = load_for(procedure.needs_head(), &p.ckpt)?;
    let xs: Vec<Pattern> = match &p.source {
        Source::Dataset(d) => load_split(d)?.samples.into_iter().map(|s| s.x).collect(),
        Source::Pattern(path) => vec![minmax01_normalize(&read_pgm(path)?)?],
    };
    let refs: Vec<&Pattern> = xs.iter().collect();
    let results = restore_batch(&ckpt.denoiser, ckpt.head.as_ref(), &refs, &p.inference, procedure, ExecPolicy::Parallel)?;

    std::fs::create_dir_all(&p.output).map_err(|e| CliError::io(&p.output, e))?;
    let mut outputs = Vec::with_capacity(2 * results.len());
    let mut flagged = Vec::new();
    for (i, (pattern, trace)) in results.iter().enumerate() {
        let stem = output_stem(i);
        let img = p.output.join(format!("{stem}.pgm"));
        write_pgm16(pattern, &img)?;
        let tr = p.output.join(format!("{stem}.trace.jsonl"));
        write_file(&tr, trace.to_jsonl().as_bytes())?;
        outputs.extend([img, tr]);
        if trace.flagged_noise {
            flagged.push(i);
        }
    }
    println!("restored {} patterns ({}) into {}", results.len(), p.mode.name(), p.output.display());
    if !flagged.is_empty() {
        println!("flagged as noise only: {flagged:?}");
    }
    Ok(outputs)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct FlagCounts {
    pub true_positive: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_negative: usize,
}

impl FlagCounts {
    fn add(&mut self, flagged: bool, is_noise: bool) {
        match (flagged, is_noise) {
            (true, true) => self.true_positive += 1,
            (true, false) => self.false_positive += 1,
            (false, true) => self.false_negative += 1,
            (false, false) => self.true_negative += 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalRow {
    pub mode: String,
    pub label: String,
    pub psnr: Value,
    pub ssim: f64,
    /// Samples that entered the image metrics.
    pub scored: usize,
    pub flags: FlagCounts,
}

/// JSON has no infinity, so identical images are reported as `"inf"`.
pub fn psnr_json(v: f64) -> Value {
    if v.is_infinite() {
        Value::from("inf")
    } else {
        Value::from(v)
    }
}

fn psnr_text(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn last_trace_flag(path: &Path) -> CliResult<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let last = text.lines().last().ok_or_else(|| CliError::format(path, "empty trace"))?;
    let v: Value = serde_json::from_str(last).map_err(|e| CliError::format(path, e.to_string()))?;
    v.get("flagged_noise")
        .and_then(Value::as_bool)
        .ok_or_else(|| CliError::format(path, "trace summary lacks flagged_noise"))
}

/// Mean PSNR/SSIM over real, unflagged samples, compared at the 16-bit
/// precision of the written outputs.
fn score(ds: &Dataset, restored: &[Pattern], flags: &[bool]) -> CliResult<(f64, f64, usize, FlagCounts)> {
    let mut counts = FlagCounts::default();
    let mut keep = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        counts.add(flags[i], s.is_noise);
        if !flags[i] && !s.is_noise {
            keep.push(i);
        }
    }
    if keep.is_empty() {
        return Err(CliError::usage("no sample with ground truth left to score"));
    }
    let reports = try_map_indexed(ExecPolicy::Parallel, keep.len(), |k| {
        let i = keep[k];
        evaluate(&quantized(&restored[i]), &quantized(&ds.samples[i].x0))
    })?;
    let n = reports.len() as f64;
    let psnr = reports.iter().map(|r| r.psnr).sum::<f64>() / n;
    let ssim = reports.iter().map(|r| r.ssim).sum::<f64>() / n;
    Ok((psnr, ssim, keep.len(), counts))
}

fn restored_mode(dir: &Path, data: &DataRef, data_sha: &str) -> CliResult<Mode> {
    let m = RunManifest::read(&dir.join(DIR_MANIFEST))?;
    let Plan::Denoise(plan) = &m.plan else {
        return Err(CliError::usage(format!("{} was not written by denoise", dir.display())));
    };
    let same_source = matches!(&plan.source, Source::Dataset(d) if d.samples == data.samples)
        && m.inputs.iter().any(|i| i.sha256 == data_sha);
    if !same_source {
        return Err(CliError::usage(format!(
            "{} was restored from a different dataset or split",
            dir.display()
        )));
    }
    Ok(plan.mode)
}

fn eval(p: &EvalPlan) -> CliResult<Vec<PathBuf>> {
    let ds = load_split(&p.data)?;
    let data_sha = digest_path(&p.data.path)?;
    let mut rows = Vec::new();

    let raw: Vec<Pattern> = ds.samples.iter().map(|s| s.x.clone()).collect();
    let (psnr, ssim, scored, flags) = score(&ds, &raw, &vec![false; ds.len()])?;
    rows.push(EvalRow { mode: "raw".into(), label: "Raw data".into(), psnr: psnr_json(psnr), ssim, scored, flags });
    let mut table = vec![("Raw data".to_string(), psnr, ssim, scored)];

    for dir in &p.restored {
        let mode = restored_mode(dir, &p.data, &data_sha)?;
        let mut imgs = Vec::with_capacity(ds.len());
        let mut flagged = Vec::with_capacity(ds.len());
        for i in 0..ds.len() {
            let stem = output_stem(i);
            let img = read_pgm(&dir.join(format!("{stem}.pgm")))?;
            if img.shape() != (ds.height, ds.width) {
                return Err(CliError::format(dir.join(format!("{stem}.pgm")), "shape differs from the dataset"));
            }
            imgs.push(img);
            flagged.push(last_trace_flag(&dir.join(format!("{stem}.trace.jsonl")))?);
        }
        let (psnr, ssim, scored, flags) = score(&ds, &imgs, &flagged)?;
        table.push((mode.label().to_string(), psnr, ssim, scored));
        rows.push(EvalRow {
            mode: mode.name().into(),
            label: mode.label().into(),
            psnr: psnr_json(psnr),
            ssim,
            scored,
            flags,
        });
    }

    println!("{:<32} {:>10} {:>8} {:>7}", "Procedure", "PSNR", "SSIM", "scored");
    for (label, psnr, ssim, n) in &table {
        println!("{label:<32} {:>10} {ssim:>8.4} {n:>7}", psnr_text(*psnr));
    }
    for r in rows.iter().skip(1) {
        let f = r.flags;
        println!(
            "{}: flagged {} of {} noise-only inputs, {} false alarms",
            r.mode,
            f.true_positive,
            f.true_positive + f.false_negative,
            f.false_positive
        );
    }
    write_json(&p.output, &rows)?;
    Ok(vec![p.output.clone()])
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::format(path, e.to_string()))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub procedure: String,
    pub psnr: Value,
    pub ssim: f64,
    pub scored: usize,
    pub flagged: usize,
    pub mean_iterations: f64,
}

/// Mean metrics of `procedure` over the real samples of `ds`.
pub fn ablation_row(
    ckpt: &Checkpoint<f32>,
    ds: &Dataset,
    inference: &diffract_core::inference::InferenceConfig,
    procedure: Procedure,
) -> CliResult<(AblationRow, Vec<(Pattern, DenoiseTrace)>)> {
    let xs: Vec<&Pattern> = ds.samples.iter().map(|s| &s.x).collect();
    let out = restore_batch(&ckpt.denoiser, ckpt.head.as_ref(), &xs, inference, procedure, ExecPolicy::Parallel)?;
    let real: Vec<usize> = (0..ds.len()).filter(|&i| !ds.samples[i].is_noise).collect();
    if real.is_empty() {
        return Err(CliError::usage("split has no sample with ground truth"));
    }
    let reports = try_map_indexed(ExecPolicy::Parallel, real.len(), |k| evaluate(&out[real[k]].0, &ds.samples[real[k]].x0))?;
    let n = real.len() as f64;
    let psnr = reports.iter().map(|r| r.psnr).sum::<f64>() / n;
    let row = AblationRow {
        procedure: procedure.label().into(),
        psnr: psnr_json(psnr),
        ssim: reports.iter().map(|r| r.ssim).sum::<f64>() / n,
        scored: real.len(),
        flagged: out.iter().filter(|(_, t)| t.flagged_noise).count(),
        mean_iterations: out.iter().map(|(_, t)| t.iterations.len() as f64).sum::<f64>() / out.len() as f64,
    };
    Ok((row, out))
}

fn ablate(p: &AblatePlan) -> CliResult<Vec<PathBuf>> {
    let ckpt = load_for(true, &p.ckpt)?;
    let ds = load_split(&p.data)?;
    println!("{:<24} {:>10} {:>8} {:>11}", "Diffusion process", "PSNR", "SSIM", "iterations");
    let mut rows = Vec::new();
    for procedure in Procedure::ABLATION {
        let (row, _) = ablation_row(&ckpt, &ds, &p.inference, procedure)?;
        let psnr = row.psnr.as_f64().unwrap_or(f64::INFINITY);
        println!("{:<24} {:>10} {:>8.4} {:>11.1}", row.procedure, psnr_text(psnr), row.ssim, row.mean_iterations);
        rows.push(row);
    }
    write_json(&p.output, &rows)?;
    Ok(vec![p.output.clone()])
}
