use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nanocontrol::control::ControlScheme;
use nanocontrol::cost::{cost_report, ArchSpec, CostOptions, CostReport, FlopConvention};
use nanocontrol::data::{read_pnm, write_pnm, Task};
use nanocontrol::flow::SamplerConfig;

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset;
use crate::error::{io_at, parse_err, CliError, Code, Result};
use crate::eval::{self, EdgeMethod};
use crate::train;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "NANOCTL_OUT_DIR";

/// `$NANOCTL_OUT_DIR/{sub}`, or `out/{sub}` when unset.
pub fn default_out(sub: &str) -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("out")).join(sub)
}

#[derive(Debug, Parser)]
#[command(name = "nanoctl", version, about = "Conditioning experiments on a toy diffusion transformer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic shapes dataset with edge and gray condition maps.
    Datagen(DatagenArgs),
    /// Train a backbone (scheme `none`) or a control branch on a frozen backbone.
    Train(TrainArgs),
    /// Sample one image from a checkpoint.
    Sample(SampleArgs),
    /// Score samples (or ground truth) against their conditions.
    Eval(EvalArgs),
    /// Parameter and FLOP increments of each control scheme.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
pub struct DatagenArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    pub count: usize,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
    #[arg(long, default_value_t = 16)]
    pub side: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub scheme: Option<ControlScheme>,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Checkpoint whose backbone weights initialize the model.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub rank_kv: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub grad_accum: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Condition map (PGM, or PPM converted to luminance).
    #[arg(long)]
    pub cond: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub label: usize,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample with the condition dropped.
    #[arg(long)]
    pub drop_cond: bool,
    /// Output PPM file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset directory or manifest of held-out scenes.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `model` samples from the checkpoint; `ground-truth` scores the dataset images.
    #[arg(long, default_value = "model")]
    pub source: String,
    #[arg(long, default_value = "sobel")]
    pub edge_method: EdgeMethod,
    #[arg(long)]
    pub task: Option<Task>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Evaluate only the first N scenes.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub save_samples: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// `flux` or `toy`.
    #[arg(long, conflicts_with = "spec")]
    pub preset: Option<String>,
    /// JSON architecture spec.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Scheme to cost; repeatable. Defaults to all.
    #[arg(long)]
    pub scheme: Vec<ControlScheme>,
    /// Image side in pixels; repeatable. Defaults to 512 and 1024 for flux, else the architecture's default.
    #[arg(long)]
    pub resolution: Vec<usize>,
    #[arg(long, default_value_t = 4)]
    pub rank_kv: usize,
    #[arg(long, default_value_t = 32)]
    pub rank_embed: usize,
    /// Give condition K/V projections to double-stream blocks only.
    #[arg(long)]
    pub no_single_blocks: bool,
    /// `macs` (default for flux) or `2mkn` (default for toy).
    #[arg(long)]
    pub convention: Option<FlopConvention>,
    /// `table` or `json`.
    #[arg(long, default_value = "table")]
    pub format: String,
    /// Also write the JSON reports here.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Datagen(a) => datagen(a, out),
        Command::Train(a) => train_cmd(a, out),
        Command::Sample(a) => sample(a, out),
        Command::Eval(a) => eval_cmd(a, out),
        Command::Cost(a) => cost(a, out),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serializable");
    io_at(path, std::fs::write(path, text + "\n"))
}

fn datagen(a: DatagenArgs, out: &mut dyn Write) -> Result<()> {
    let dir = a.out.unwrap_or_else(|| default_out("data"));
    let records = dataset::generate(&dir, a.count, a.seed, a.side)?;
    writeln!(out, "wrote {} scenes to {}", records.len(), dir.display())?;
    Ok(())
}

/// The run configuration after applying flag overrides.
pub fn resolve_train_config(a: &TrainArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    macro_rules! set {
        ($flag:expr, $field:expr) => {
            if let Some(v) = $flag.clone() {
                $field = v;
            }
        };
    }
    set!(a.scheme, cfg.scheme);
    set!(a.task, cfg.task);
    set!(a.steps, cfg.steps);
    set!(a.lr, cfg.optimizer.lr);
    set!(a.seed, cfg.seed);
    set!(a.rank_kv, cfg.model.rank_kv);
    set!(a.batch_size, cfg.batch_size);
    set!(a.grad_accum, cfg.grad_accum);
    if a.epochs.is_some() {
        cfg.epochs = a.epochs;
    }
    if a.dataset.is_some() {
        cfg.dataset = a.dataset.clone();
    }
    if a.backbone.is_some() {
        cfg.backbone = a.backbone.clone();
    }
    if a.out.is_some() {
        cfg.out_dir = a.out.clone();
    }
    if cfg.out_dir.is_none() {
        cfg.out_dir = Some(default_out(&format!("train-{}", cfg.scheme)));
    }
    cfg.validate()?;
    Ok(cfg)
}

fn train_cmd(a: TrainArgs, out: &mut dyn Write) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    let data_path = cfg
        .dataset
        .clone()
        .ok_or_else(|| CliError::new(Code::Config, "no dataset given (--dataset or \"dataset\")"))?;
    let data = dataset::load(&data_path)?;
    let backbone = match &cfg.backbone {
        Some(p) => {
            let (model, _) = checkpoint::load(p)?;
            let shape = |c: &nanocontrol::dit::DiTConfig| {
                (
                    c.d_model,
                    c.n_heads,
                    c.n_blocks,
                    c.patch_size,
                    c.image_channels,
                    c.image_side,
                    c.text_tokens,
                    c.mlp_ratio,
                    c.n_classes,
                )
            };
            if shape(&model.config) != shape(&cfg.model) {
                return Err(CliError::new(
                    Code::Shape,
                    format!("{}: backbone architecture differs from the run's model", p.display()),
                ));
            }
            Some(model.store)
        }
        None => None,
    };
    let dir = cfg.out_dir.clone().expect("resolved");
    io_at(&dir, std::fs::create_dir_all(&dir))?;
    cfg.write(&dir.join("config.json"))?;
    let log_path = dir.join("log.jsonl");
    let mut log = std::io::BufWriter::new(io_at(&log_path, std::fs::File::create(&log_path))?);
    let (model, summary) = train::train(&cfg, &data, backbone.as_ref(), Some(&mut log))?;
    log.flush()?;
    checkpoint::save(&dir.join("checkpoint.nckp"), &model, &cfg, summary.steps as u64)?;
    write_json(&dir.join("summary.json"), &summary)?;
    writeln!(
        out,
        "trained {} for {} steps: loss {:.4} -> {:.4}; checkpoint {}",
        summary.scheme,
        summary.steps,
        summary.first_loss,
        summary.tail_loss,
        dir.join("checkpoint.nckp").display()
    )?;
    Ok(())
}

/// A condition map from a PGM, or from a PPM via its luminance.
fn read_condition(path: &Path) -> Result<nanocontrol::tensor::Tensor<f64>> {
    let img = read_pnm(path).map_err(|e| {
        let e = CliError::from(e);
        CliError::new(e.code, format!("{}: {}", path.display(), e.message))
    })?;
    if img.shape()[0] == 3 {
        Ok(nanocontrol::data::gray_of(&img)?)
    } else {
        Ok(img)
    }
}

fn sampler_from(
    base: &SamplerConfig,
    steps: Option<usize>,
    guidance: Option<f64>,
    seed: Option<u64>,
) -> Result<SamplerConfig> {
    let sc = SamplerConfig {
        steps: steps.unwrap_or(base.steps),
        guidance_scale: guidance.unwrap_or(base.guidance_scale),
        seed: seed.unwrap_or(base.seed),
    };
    sc.validate()?;
    Ok(sc)
}

fn sample(a: SampleArgs, out: &mut dyn Write) -> Result<()> {
    let (model, header) = checkpoint::load(&a.checkpoint)?;
    let sc = sampler_from(&header.run.sampler, a.steps, a.guidance, a.seed)?;
    if a.label >= model.config.n_classes {
        return Err(CliError::new(
            Code::Contract,
            format!("label {} out of range for {} classes", a.label, model.config.n_classes),
        ));
    }
    let cond = match (&a.cond, a.drop_cond) {
        (_, true) => None,
        (Some(p), false) => Some(read_condition(p)?),
        (None, false) if model.scheme.is_conditioned() => {
            return Err(CliError::new(
                Code::Contract,
                format!("scheme `{}` needs --cond (or --drop-cond)", model.scheme),
            ));
        }
        (None, false) => None,
    };
    let img = eval::sample_image(&model, cond.as_ref(), a.label, &sc)?;
    let path = a.out.unwrap_or_else(|| default_out("sample.ppm"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        io_at(parent, std::fs::create_dir_all(parent))?;
    }
    write_pnm(&path, &img)?;
    writeln!(out, "wrote {}", path.display())?;
    Ok(())
}

fn eval_cmd(a: EvalArgs, out: &mut dyn Write) -> Result<()> {
    let mut examples = dataset::load(&a.data)?;
    if let Some(n) = a.limit {
        examples.truncate(n);
    }
    let dir = a.out.clone().unwrap_or_else(|| default_out("eval"));
    io_at(&dir, std::fs::create_dir_all(&dir))?;
    let (images, task) = match a.source.as_str() {
        "ground-truth" => (examples.iter().map(|e| e.image.clone()).collect::<Vec<_>>(), a.task.unwrap_or(Task::Edge)),
        "model" => {
            let ckpt = a
                .checkpoint
                .as_ref()
                .ok_or_else(|| CliError::new(Code::Config, "--source model needs --checkpoint"))?;
            let (model, header) = checkpoint::load(ckpt)?;
            let sc = sampler_from(&header.run.sampler, a.steps, a.guidance, a.seed)?;
            let task = a.task.unwrap_or(header.run.task);
            (eval::generate(&model, &examples, task, &sc)?, task)
        }
        s => return Err(CliError::new(Code::Config, format!("unknown source `{s}` (expected model or ground-truth)"))),
    };
    if a.save_samples {
        for (ex, img) in examples.iter().zip(&images) {
            write_pnm(&dir.join(format!("{}.ppm", ex.id)), img)?;
        }
    }
    let report = eval::score(&examples, &images, task, a.edge_method, &a.source)?;
    write_json(&dir.join("report.json"), &report)?;
    let mean = report.mean.map_or("n/a".to_string(), |m| format!("{m:.4}"));
    writeln!(
        out,
        "{} {}: mean {} over {} scored ({} excluded); report {}",
        report.source,
        report.metric,
        mean,
        report.n_scored,
        report.n_excluded,
        dir.join("report.json").display()
    )?;
    Ok(())
}

/// Reports for every requested scheme × resolution.
pub fn cost_reports(a: &CostArgs) -> Result<Vec<CostReport>> {
    let spec = match (&a.spec, &a.preset) {
        (Some(p), _) => {
            let text = io_at(p, std::fs::read_to_string(p))?;
            serde_json::from_str::<ArchSpec>(&text).map_err(|e| parse_err(p, e))?
        }
        (None, Some(name)) => ArchSpec::preset(name)?,
        (None, None) => ArchSpec::flux(),
    };
    let is_flux = spec.name == "flux";
    let schemes = if a.scheme.is_empty() { ControlScheme::ALL.to_vec() } else { a.scheme.clone() };
    let resolutions = match (a.resolution.is_empty(), is_flux) {
        (false, _) => a.resolution.clone(),
        (true, true) => vec![512, 1024],
        (true, false) => vec![spec.resolution],
    };
    let convention = a.convention.unwrap_or(if is_flux { FlopConvention::Macs } else { FlopConvention::TwoMkn });
    let mut reports = Vec::new();
    for &res in &resolutions {
        for &scheme in &schemes {
            let opts = CostOptions {
                resolution: Some(res),
                rank_kv: a.rank_kv,
                rank_embed: a.rank_embed,
                inject_single_blocks: !a.no_single_blocks,
                convention,
            };
            reports.push(cost_report(&spec, scheme, &opts)?);
        }
    }
    Ok(reports)
}

fn human(v: u64, unit: &str) -> String {
    let v = v as f64;
    match unit {
        "params" if v >= 1e6 => format!("{:.2} M", v / 1e6),
        "params" => format!("{v}"),
        _ if v >= 1e9 => format!("{:.2} G", v / 1e9),
        _ if v >= 1e6 => format!("{:.2} M", v / 1e6),
        _ => format!("{v}"),
    }
}

/// Fixed-width table of the reports.
pub fn cost_table(reports: &[CostReport]) -> String {
    let mut s = String::new();
    if let Some(r) = reports.first() {
        let unit = match r.convention {
            FlopConvention::Macs => "MACs",
            FlopConvention::TwoMkn => "2mkn ops",
        };
        s += &format!(
            "arch {}: base {} params (modeled {}), FLOPs in {unit}\n",
            r.arch,
            human(r.base_params, "params"),
            human(r.modeled_base_params, "params")
        );
    }
    s += &format!(
        "{:<15} {:>5} {:>11} {:>9} {:>12} {:>12} {:>9} {:>9}\n",
        "scheme", "res", "+params", "+param%", "+module", "+full", "module%", "full%"
    );
    for r in reports {
        s += &format!(
            "{:<15} {:>5} {:>11} {:>9.4} {:>12} {:>12} {:>9.4} {:>9.4}\n",
            r.scheme.as_str(),
            r.resolution,
            human(r.added_params, "params"),
            r.added_params_pct,
            human(r.added_flops.module_only, "flops"),
            human(r.added_flops.full_attention, "flops"),
            r.added_flops_pct.module_only,
            r.added_flops_pct.full_attention
        );
    }
    s += "module = weight matmuls of the control branch; full = module plus attention score/value products\n";
    s
}

fn cost(a: CostArgs, out: &mut dyn Write) -> Result<()> {
    let reports = cost_reports(&a)?;
    if let Some(p) = &a.json {
        write_json(p, &reports)?;
    }
    match a.format.as_str() {
        "table" => write!(out, "{}", cost_table(&reports))?,
        "json" => writeln!(out, "{}", serde_json::to_string_pretty(&reports).expect("serializable"))?,
        f => return Err(CliError::new(Code::Config, format!("unknown format `{f}` (expected table or json)"))),
    }
    Ok(())
}
