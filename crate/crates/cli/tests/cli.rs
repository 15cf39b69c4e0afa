use std::path::Path;
use std::process::{Command, Output};

use diffract_cli::manifest::RunManifest;
use diffract_cli::pgm::write_pgm16;
use diffract_cli::plan::Plan;
use diffract_core::dataset::Dataset;
use diffract_core::model::load_checkpoint;
use serde_json::Value;

fn run(dir: &Path, args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_diffract"));
    cmd.current_dir(dir).args(args);
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("failed to launch diffract")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args, &[]);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("terminated by signal")
}

fn gen_small(dir: &Path) {
    ok(dir, &["gen-data", "--train", "8", "--val", "2", "--test", "5", "--size", "32", "--noise-frac", "0.2", "--seed", "4", "-o", "data.dfrct"]);
}

fn train_small(dir: &Path) {
    let common = ["--data", "data.dfrct", "--T", "6", "--epochs", "1", "--batch-size", "4"];
    let mut s1 = vec!["train", "--stage", "denoiser", "--width", "4", "-o", "ck1"];
    s1.extend(common);
    ok(dir, &s1);
    let mut s2 = vec!["train", "--stage", "quality", "--from", "ck1", "-o", "ck2"];
    s2.extend(common);
    ok(dir, &s2);
}

#[test]
fn usage_errors_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let zero = run(d, &["gen-data", "--train", "0", "-o", "x.dfrct"], &[]);
    assert_eq!(code(&zero), 2);
    assert!(!d.join("x.dfrct").exists());

    gen_small(d);
    let no_from = run(d, &["train", "--stage", "quality", "--data", "data.dfrct", "-o", "ck"], &[]);
    assert_eq!(code(&no_from), 2);
    assert!(String::from_utf8_lossy(&no_from.stderr).contains("--from"));

    let bad_threads = run(d, &["gen-data", "-o", "y.dfrct"], &[("DIFFRACT_THREADS", "0")]);
    assert_eq!(code(&bad_threads), 2);

    let missing = run(d, &["denoise", "--ckpt", "nope", "--data", "data.dfrct", "-o", "out"], &[]);
    assert_eq!(code(&missing), 2);

    let no_subcommand = run(d, &[], &[]);
    assert_eq!(code(&no_subcommand), 2);
}

#[test]
fn head_modes_need_a_stage_two_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    ok(d, &["train", "--stage", "denoiser", "--data", "data.dfrct", "--T", "6", "--epochs", "1", "--width", "4", "-o", "ck1"]);
    for mode in ["feedback", "one-step-tx"] {
        let out = run(d, &["denoise", "--mode", mode, "--ckpt", "ck1", "--data", "data.dfrct", "-o", mode], &[]);
        assert_eq!(code(&out), 2, "{mode}");
    }
    ok(d, &["denoise", "--mode", "fixed", "--ckpt", "ck1", "--data", "data.dfrct", "-o", "fixed"]);
    ok(d, &["denoise", "--mode", "one-step", "--ckpt", "ck1", "--data", "data.dfrct", "-o", "one"]);

    let wrong_t = run(d, &["train", "--stage", "quality", "--from", "ck1", "--data", "data.dfrct", "--T", "9", "-o", "ck2"], &[]);
    assert_eq!(code(&wrong_t), 2);
}

#[test]
fn gen_data_is_reproducible_and_records_its_layout() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    let first = std::fs::read(d.join("data.dfrct")).unwrap();
    gen_small(d);
    assert_eq!(std::fs::read(d.join("data.dfrct")).unwrap(), first);

    let m = RunManifest::read(&d.join("data.dfrct.manifest.json")).unwrap();
    assert_eq!(m.seed, Some(4));
    let Plan::GenData(plan) = m.plan else { panic!("wrong plan kind") };
    assert_eq!((plan.dataset.train, plan.dataset.val, plan.dataset.test), (8, 2, 5));

    let ds = Dataset::read(&d.join("data.dfrct")).unwrap();
    assert_eq!(ds.len(), 15);
    assert_eq!((ds.height, ds.width), (32, 32));
}

#[test]
fn training_writes_checkpoints_logs_and_keeps_stage_one_weights() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    train_small(d);
    let c1 = load_checkpoint::<f32>(&d.join("ck1")).unwrap();
    let c2 = load_checkpoint::<f32>(&d.join("ck2")).unwrap();
    assert!(c1.head.is_none());
    assert!(c2.head.is_some());
    assert_eq!(c1.steps, 6);
    assert_eq!(c2.denoiser, c1.denoiser);

    let log = std::fs::read_to_string(d.join("ck1.metrics.jsonl")).unwrap();
    let epochs: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(epochs.len(), 1);
    assert!(epochs[0]["mean_loss"].as_f64().unwrap().is_finite());

    let m = RunManifest::read(&d.join("ck2.manifest.json")).unwrap();
    let inputs: Vec<_> = m.inputs.iter().map(|i| i.path.to_str().unwrap().to_string()).collect();
    assert_eq!(inputs, ["data.dfrct", "ck1"]);
}

#[test]
fn denoise_writes_one_image_and_trace_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    train_small(d);
    ok(d, &["denoise", "--ckpt", "ck2", "--data", "data.dfrct", "-o", "fb"]);
    let mut names: Vec<String> =
        std::fs::read_dir(d.join("fb")).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    assert_eq!(names.len(), 2 * 5 + 1);
    assert_eq!(names[0], "00000.pgm");
    assert!(names.contains(&"manifest.json".to_string()));

    let trace = std::fs::read_to_string(d.join("fb/00000.trace.jsonl")).unwrap();
    let lines: Vec<Value> = trace.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let summary = lines.last().unwrap();
    assert!(summary.get("flagged_noise").is_some());
    assert!(summary["r_hat_init"].is_number());
    assert!(lines.len() - 1 <= 6);

    let img = std::fs::read(d.join("fb/00000.pgm")).unwrap();
    assert!(img.starts_with(b"P5\n32 32\n65535\n"));
    assert_eq!(img.len(), b"P5\n32 32\n65535\n".len() + 2 * 32 * 32);
}

#[test]
fn single_pgm_input_is_restored() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    train_small(d);
    let ds = Dataset::read(&d.join("data.dfrct")).unwrap();
    write_pgm16(&ds.samples[0].x, &d.join("in.pgm")).unwrap();
    ok(d, &["denoise", "--mode", "one-step-tx", "--ckpt", "ck2", "--input", "in.pgm", "-o", "single"]);
    assert!(d.join("single/00000.pgm").exists());
    assert!(d.join("single/00000.trace.jsonl").exists());
}

#[test]
fn eval_of_perfect_restorations_reports_infinite_psnr() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    train_small(d);
    ok(d, &["denoise", "--mode", "fixed", "--ckpt", "ck2", "--data", "data.dfrct", "-o", "fixed"]);
    ok(d, &["denoise", "--mode", "one-step", "--ckpt", "ck2", "--data", "data.dfrct", "-o", "one"]);
    let ds = Dataset::read(&d.join("data.dfrct")).unwrap().subset(10..15).unwrap();
    for (i, s) in ds.samples.iter().enumerate() {
        write_pgm16(&s.x0, &d.join(format!("fixed/{i:05}.pgm"))).unwrap();
    }
    ok(d, &["eval", "--data", "data.dfrct", "--restored", "fixed", "--restored", "one", "-o", "eval.json"]);
    let rows: Value = serde_json::from_slice(&std::fs::read(d.join("eval.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    let modes: Vec<&str> = rows.iter().map(|r| r["mode"].as_str().unwrap()).collect();
    assert_eq!(modes, ["raw", "fixed", "one-step"]);
    assert_eq!(rows[1]["psnr"], "inf");
    assert!((rows[1]["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    assert!(rows[0]["psnr"].as_f64().unwrap().is_finite());
    let noise = ds.samples.iter().filter(|s| s.is_noise).count();
    assert_eq!(rows[0]["scored"].as_u64().unwrap() as usize, 5 - noise);

    let other = run(d, &["eval", "--data", "data.dfrct", "--split", "val", "--restored", "fixed", "-o", "bad.json"], &[]);
    assert_eq!(code(&other), 2);
}

#[test]
fn ablation_report_is_stable() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    train_small(d);
    let table = ok(d, &["ablate", "--ckpt", "ck2", "--data", "data.dfrct", "-o", "a.json"]);
    assert!(table.contains("+ best step selection"));
    ok(d, &["ablate", "--ckpt", "ck2", "--data", "data.dfrct", "-o", "b.json"]);
    let a = std::fs::read(d.join("a.json")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.json")).unwrap());
    let rows: Value = serde_json::from_slice(&a).unwrap();
    let labels: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["procedure"].as_str().unwrap()).collect();
    assert_eq!(labels, ["Baseline", "+ start step", "+ dynamic step", "+ best step selection"]);
}

#[test]
fn replay_reproduces_outputs_and_refuses_changed_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    gen_small(d);
    train_small(d);
    let data_before = std::fs::read(d.join("data.dfrct")).unwrap();
    ok(d, &["replay", "ck1.manifest.json", "-o", "ck1-again"]);
    assert_eq!(std::fs::read(d.join("ck1")).unwrap(), std::fs::read(d.join("ck1-again")).unwrap());
    assert_eq!(std::fs::read(d.join("data.dfrct")).unwrap(), data_before);

    ok(d, &["replay", "data.dfrct.manifest.json", "-o", "data-again.dfrct"]);
    assert_eq!(std::fs::read(d.join("data-again.dfrct")).unwrap(), data_before);

    let mut bytes = data_before.clone();
    *bytes.last_mut().unwrap() ^= 1;
    std::fs::write(d.join("data.dfrct"), bytes).unwrap();
    let refused = run(d, &["replay", "ck1.manifest.json", "-o", "ck1-third"], &[]);
    assert_eq!(code(&refused), 2);
    assert!(!d.join("ck1-third").exists());
}
