use std::path::{Path, PathBuf};
use std::process::Command;

use nanocontrol::control::ControlScheme;
use nanocontrol::cost::{cost_report, ArchSpec, CostOptions, CostReport, FlopConvention};
use nanocontrol::data::{write_pnm, Task};
use nanocontrol::dit::{DiTConfig, Model};
use nanocontrol::tensor::Tensor;
use nanocontrol_cli::checkpoint::{self, Header, VERSION};
use nanocontrol_cli::config::RunConfig;
use nanocontrol_cli::dataset;
use nanocontrol_cli::eval::{self, EdgeMethod};
use nanocontrol_cli::train::train;
use nanocontrol_cli::Code;

fn tiny_model() -> DiTConfig {
    DiTConfig {
        d_model: 16,
        n_heads: 2,
        n_blocks: 2,
        image_side: 10,
        rank_embed: 4,
        rank_kv: 2,
        ..DiTConfig::default()
    }
}

fn tiny_run(scheme: ControlScheme, steps: usize) -> RunConfig {
    RunConfig {
        model: tiny_model(),
        scheme,
        steps,
        optimizer: nanocontrol::tensor::AdamWConfig { lr: 1e-3, ..Default::default() },
        ..RunConfig::default()
    }
}

fn tiny_data(dir: &Path, count: usize) -> Vec<dataset::Example> {
    dataset::generate(dir, count, 5, 10).unwrap();
    dataset::load(dir).unwrap()
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nanoctl"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

/// Exit status and the single stderr line of a failing command.
fn run_err(cmd: &mut Command) -> (i32, String) {
    let out = cmd.output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    (out.status.code().unwrap(), err.trim_end().to_string())
}

#[test]
fn run_config_defaults() {
    let c = RunConfig::default();
    assert_eq!(
        (c.optimizer.lr, c.optimizer.weight_decay, c.optimizer.beta1, c.optimizer.beta2),
        (1e-4, 0.01, 0.9, 0.999)
    );
    assert_eq!((c.batch_size, c.grad_accum, c.effective_batch()), (1, 4, 4));
    assert_eq!((c.steps, c.dropout, c.seed), (2000, 0.1, 42));
    assert_eq!((c.sampler.steps, c.sampler.guidance_scale, c.sampler.seed), (24, 3.5, 42));
    let with_epochs = RunConfig { epochs: Some(3), ..RunConfig::default() };
    assert_eq!(with_epochs.total_steps(10), 8);
}

#[test]
fn run_config_rejects_unknown_keys_with_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("run.json");
    std::fs::write(&p, "{\n  \"scheme\": \"additive\",\n  \"learning_rate\": 0.1\n}").unwrap();
    let e = RunConfig::load(&p).unwrap_err();
    assert_eq!(e.code, Code::Parse);
    assert!(e.message.contains("line 3"), "{}", e.message);
    std::fs::write(&p, "{\"scheme\": \"additive\", \"optimizer\": {\"lr\": 0.5}}").unwrap();
    let c = RunConfig::load(&p).unwrap();
    assert_eq!((c.scheme, c.optimizer.lr, c.optimizer.weight_decay), (ControlScheme::Additive, 0.5, 0.01));
    let bad = RunConfig { dropout: 1.5, ..RunConfig::default() };
    assert_eq!(bad.validate().unwrap_err().code, Code::Config);
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for scheme in ControlScheme::ALL {
        let model = Model::<f32>::new(tiny_model(), scheme, 9).unwrap();
        let bytes = checkpoint::encode(&model, &RunConfig::default(), 7);
        let (back, header) = checkpoint::decode(&bytes).unwrap();
        assert_eq!(header.step, 7);
        assert_eq!(header.scheme, scheme);
        for ((_, a), (_, b)) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
            assert_eq!(a.trainable, b.trainable);
        }
        assert_eq!(checkpoint::encode(&back, &RunConfig::default(), 7), bytes);
    }
}

#[test]
fn checkpoint_manifest_tiles_the_blob() {
    let model = Model::<f32>::new(tiny_model(), ControlScheme::NanoControl, 1).unwrap();
    let bytes = checkpoint::encode(&model, &RunConfig::default(), 0);
    assert_eq!(&bytes[..4], b"NCKP");
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), VERSION);
    let (header, blob): (Header, &[u8]) = checkpoint::split(&bytes).unwrap();
    let mut end = 0;
    for e in &header.params {
        assert_eq!(e.offset, end);
        end += e.len;
    }
    assert_eq!(end as usize, blob.len());
    assert_eq!(blob.len(), 4 * model.store.count(|_| true));
}

#[test]
fn checkpoint_rejects_other_versions_and_corruption() {
    let model = Model::<f32>::new(tiny_model(), ControlScheme::None, 1).unwrap();
    let mut bytes = checkpoint::encode(&model, &RunConfig::default(), 0);
    let good = bytes.clone();
    bytes[4..8].copy_from_slice(&2u32.to_le_bytes());
    let e = checkpoint::decode(&bytes).unwrap_err();
    assert_eq!(e.code, Code::Version);
    assert!(e.message.contains("version 2") && e.message.contains(&format!("version {VERSION}")), "{}", e.message);
    assert_eq!(checkpoint::decode(&good[..good.len() - 4]).unwrap_err().code, Code::Parse);
    assert_eq!(checkpoint::decode(b"P6\n").unwrap_err().code, Code::Parse);
}

#[test]
fn training_is_deterministic_and_keeps_the_backbone_frozen() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 8);
    let (bb, _) = train(&tiny_run(ControlScheme::None, 3), &data, None, None).unwrap();
    for scheme in [ControlScheme::NanoControl, ControlScheme::ControlNetDup, ControlScheme::UnifiedSeq] {
        let cfg = tiny_run(scheme, 3);
        let (a, sa) = train(&cfg, &data, Some(&bb.store), None).unwrap();
        let (b, _) = train(&cfg, &data, Some(&bb.store), None).unwrap();
        assert_eq!(checkpoint::encode(&a, &cfg, 3), checkpoint::encode(&b, &cfg, 3), "{scheme}");
        assert_eq!(sa.backbone_checksum_before, sa.backbone_checksum_after, "{scheme}");
        assert_eq!(a.backbone_checksum(), bb.backbone_checksum());
    }
    let (_, s) = train(&tiny_run(ControlScheme::None, 2), &data, None, None).unwrap();
    assert_ne!(s.backbone_checksum_before, s.backbone_checksum_after);
}

#[test]
fn training_reduces_the_loss() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 16);
    let mut improved = Vec::new();
    for seed in 0..3 {
        let mut cfg = tiny_run(ControlScheme::None, 500);
        cfg.seed = seed;
        let mut log = Vec::new();
        let (_, s) = train(&cfg, &data, None, Some(&mut log)).unwrap();
        let lines: Vec<serde_json::Value> =
            String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines.len(), 500);
        assert_eq!(lines[0]["step"], 1);
        assert!(lines[499]["wall_ms"].is_u64());
        improved.push(s.tail_loss < s.first_loss);
    }
    assert!(improved.iter().filter(|&&b| b).count() >= 2, "{improved:?}");
}

#[test]
fn diverging_training_aborts_with_the_step() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 4);
    let mut cfg = tiny_run(ControlScheme::None, 50);
    cfg.optimizer.lr = 1e30;
    let e = train(&cfg, &data, None, None).unwrap_err();
    assert_eq!(e.code, Code::Nan);
    assert!(e.message.contains("step"), "{}", e.message);
}

#[test]
fn ground_truth_scores_zero_with_analytic_edges() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 12);
    let images: Vec<Tensor<f64>> = data.iter().map(|e| e.image.clone()).collect();
    let r = eval::score(&data, &images, Task::Edge, EdgeMethod::Analytic, "ground-truth").unwrap();
    assert_eq!(r.mean, Some(0.0));
    assert_eq!((r.n, r.n_scored, r.n_excluded), (12, 12, 0));
    let g = eval::score(&data, &images, Task::Gray, EdgeMethod::Sobel, "ground-truth").unwrap();
    let quantum = 1.0 / 255.0;
    assert!(g.mean.unwrap() < quantum * quantum, "{:?}", g.mean);
}

#[test]
fn report_mean_is_the_average_of_scored_samples() {
    let dir = tempfile::tempdir().unwrap();
    let data = tiny_data(dir.path(), 6);
    let mut images: Vec<Tensor<f64>> = data.iter().rev().map(|e| e.image.clone()).collect();
    images[0] = Tensor::zeros(&[3, 10, 10]);
    let r = eval::score(&data, &images, Task::Edge, EdgeMethod::Sobel, "test").unwrap();
    assert!(r.samples[0].excluded && r.samples[0].score.is_none());
    assert_eq!(r.n_excluded, 1);
    let scored: Vec<f64> = r.samples.iter().filter_map(|s| s.score).collect();
    assert_eq!(scored.len(), 5);
    let mut sum = 0.0;
    for s in &scored {
        sum += s;
    }
    assert_eq!(r.mean.unwrap(), sum / 5.0);
}

fn trained_checkpoint(dir: &Path, scheme: ControlScheme) -> PathBuf {
    let data_dir = dir.join("data");
    let data = tiny_data(&data_dir, 6);
    let cfg = RunConfig {
        sampler: nanocontrol::flow::SamplerConfig { steps: 4, ..Default::default() },
        ..tiny_run(scheme, 2)
    };
    let (model, _) = train(&cfg, &data, None, None).unwrap();
    let path = dir.join(format!("{scheme}.nckp"));
    checkpoint::save(&path, &model, &cfg, 2).unwrap();
    path
}

#[test]
fn sample_command_is_reproducible_and_guidance_zero_drops_the_condition() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path(), ControlScheme::NanoControl);
    let cond = dir.path().join("data/00001_edge.pgm");
    let out = |name: &str, extra: &[&str]| {
        let p = dir.path().join(name);
        let mut cmd = bin();
        cmd.args(["sample", "--checkpoint"]).arg(&ckpt).arg("--cond").arg(&cond).arg("--out").arg(&p).args(extra);
        run_ok(&mut cmd);
        std::fs::read(p).unwrap()
    };
    let a = out("a.ppm", &["--seed", "3"]);
    assert_eq!(a, out("b.ppm", &["--seed", "3"]));
    assert!(a.starts_with(b"P6\n10 10\n255\n") && a.len() == 13 + 300);
    assert_ne!(a, out("c.ppm", &["--seed", "4"]));
    assert_eq!(out("g0.ppm", &["--guidance", "0"]), out("drop.ppm", &["--drop-cond"]));
    let one = out("one.ppm", &["--steps", "1"]);
    assert!(nanocontrol::data::decode_pnm(&one).is_ok());
}

#[test]
fn eval_command_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path(), ControlScheme::Additive);
    let report = dir.path().join("ev");
    let mut cmd = bin();
    cmd.args(["eval", "--data"])
        .arg(dir.path().join("data"))
        .arg("--checkpoint")
        .arg(&ckpt)
        .arg("--out")
        .arg(&report)
        .args(["--limit", "3"]);
    let stdout = run_ok(&mut cmd);
    assert!(stdout.contains("model hdd"), "{stdout}");
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["n"], 3);
    let mut cmd = bin();
    cmd.args(["eval", "--source", "ground-truth", "--edge-method", "analytic", "--data"])
        .arg(dir.path().join("data"))
        .arg("--out")
        .arg(&report);
    run_ok(&mut cmd);
    let r: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(report.join("report.json")).unwrap()).unwrap();
    assert_eq!(r["mean"], 0.0);
}

#[test]
fn datagen_and_train_commands_write_their_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut cmd = bin();
    cmd.env("NANOCTL_OUT_DIR", dir.path()).args(["datagen", "--count", "3", "--side", "10"]);
    run_ok(&mut cmd);
    let data = dir.path().join("data");
    assert_eq!(std::fs::read_to_string(data.join("manifest.jsonl")).unwrap().lines().count(), 3);
    assert!(data.join("00002_edge.pgm").exists());

    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, serde_json::to_string(&RunConfig { model: tiny_model(), ..RunConfig::default() }).unwrap())
        .unwrap();
    let mut cmd = bin();
    cmd.env("NANOCTL_OUT_DIR", dir.path())
        .args(["train", "--scheme", "none", "--steps", "2", "--config"])
        .arg(&cfg)
        .arg("--dataset")
        .arg(&data);
    run_ok(&mut cmd);
    let run = dir.path().join("train-none");
    for f in ["config.json", "log.jsonl", "checkpoint.nckp", "summary.json"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let echoed = RunConfig::load(&run.join("config.json")).unwrap();
    assert_eq!((echoed.scheme, echoed.steps, echoed.model.d_model), (ControlScheme::None, 2, 16));
}

#[test]
fn errors_are_single_coded_lines() {
    let dir = tempfile::tempdir().unwrap();
    let (code, line) = run_err(bin().args(["train", "--dataset"]).arg(dir.path().join("missing")));
    assert!(line.starts_with("E_IO: "), "{line}");
    assert_eq!(code, Code::Io.exit_code());
    let (_, line) = run_err(bin().args(["train", "--scheme", "controlnet"]));
    assert!(line.starts_with("E_CONFIG: "), "{line}");
    let spec = dir.path().join("spec.json");
    std::fs::write(&spec, "{\n \"name\": \"x\",\n \"d_model\": 3072,\n oops\n}").unwrap();
    let (_, line) = run_err(bin().args(["cost", "--spec"]).arg(&spec));
    assert!(line.starts_with("E_PARSE: ") && line.contains("line 4"), "{line}");

    let model = Model::<f32>::new(tiny_model(), ControlScheme::None, 0).unwrap();
    let mut bytes = checkpoint::encode(&model, &RunConfig::default(), 0);
    bytes[4..8].copy_from_slice(&9u32.to_le_bytes());
    let ckpt = dir.path().join("old.nckp");
    std::fs::write(&ckpt, bytes).unwrap();
    let (code, line) = run_err(bin().args(["sample", "--checkpoint"]).arg(&ckpt));
    assert!(line.starts_with("E_VERSION: ") && line.contains("version 9") && line.contains("version 1"), "{line}");
    assert_eq!(code, Code::Version.exit_code());
}

#[test]
fn cost_command_reports_flux_and_toy() {
    let json = run_ok(bin().args([
        "cost",
        "--preset",
        "flux",
        "--scheme",
        "nanocontrol",
        "--scheme",
        "none",
        "--resolution",
        "512",
        "--format",
        "json",
    ]));
    let reports: serde_json::Value = serde_json::from_str(&json).unwrap();
    let nano = &reports[0];
    let params = nano["added_params"].as_f64().unwrap();
    assert!((2.4e6..=3.6e6).contains(&params), "{params}");
    assert!(nano["added_flops"]["module_only"].is_u64() && nano["added_flops"]["full_attention"].is_u64());
    assert_eq!(reports[1]["added_params"], 0);
    assert_eq!(reports[1]["added_flops"]["module_only"], 0);

    let table = run_ok(bin().args(["cost", "--preset", "flux"]));
    assert!(table.contains("nanocontrol") && table.contains("unified_seq") && table.contains("full"), "{table}");

    let json = run_ok(bin().args(["cost", "--preset", "toy", "--scheme", "unified_seq", "--format", "json"]));
    let toy: serde_json::Value = serde_json::from_str(&json).unwrap();
    let cfg = DiTConfig::default();
    let opts = CostOptions { rank_kv: 4, rank_embed: 32, convention: FlopConvention::TwoMkn, ..CostOptions::default() };
    let lib = cost_report(&ArchSpec::toy(&cfg), ControlScheme::UnifiedSeq, &opts).unwrap();
    let parsed: CostReport = serde_json::from_value(toy[0].clone()).unwrap();
    assert_eq!(
        (parsed.added_params, parsed.added_flops, &parsed.breakdown),
        (lib.added_params, lib.added_flops, &lib.breakdown)
    );
    assert_eq!((parsed.base_params, parsed.base_flops), (lib.base_params, lib.base_flops));
    assert!((parsed.added_flops_pct.module_only - lib.added_flops_pct.module_only).abs() < 1e-9);

    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("toy.json");
    std::fs::write(&spec, serde_json::to_string(&ArchSpec::toy(&cfg)).unwrap()).unwrap();
    let path = dir.path().join("cost.json");
    run_ok(bin().args(["cost", "--scheme", "nanocontrol", "--spec"]).arg(&spec).arg("--json").arg(&path));
    let written: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert_eq!(
        written[0]["added_params"],
        Model::<f32>::new(cfg, ControlScheme::NanoControl, 0).unwrap().control_param_count()
    );
}

#[test]
fn unconditioned_sampling_of_a_conditioned_model_needs_a_flag() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained_checkpoint(dir.path(), ControlScheme::NanoControl);
    let (_, line) = run_err(bin().args(["sample", "--checkpoint"]).arg(&ckpt));
    assert!(line.starts_with("E_CONTRACT: "), "{line}");
    let img = dir.path().join("wrong.pgm");
    write_pnm(&img, &Tensor::zeros(&[1, 8, 8])).unwrap();
    let (_, line) = run_err(bin().args(["sample", "--checkpoint"]).arg(&ckpt).arg("--cond").arg(&img));
    assert!(line.starts_with("E_SHAPE: "), "{line}");
}
