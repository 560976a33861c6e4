//! Command-line surface: dataset generation, grouping, training, removal,
//! evaluation, and inference-time parameter sweeps.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error. Every command
//! echoes its effective settings to `run.json` beside its outputs.

use crate::config::{RunConfig, RunRecord};
use crate::diffusion::{
    self, evaluate, remove_clouds, train, SampleConfig, TrainEnable,
};
use crate::error::{Error, Result};
use crate::grouping::{group_corpus, make_stage_plan, StagePlan};
use crate::imagery::{load_image, save_image};
use crate::net::{PromptCondition, UNet, UNetConfig};
use crate::synthcloud::{gen_corpus, CorpusManifest, Split};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "decloud",
    version,
    about = "Prompt-conditioned diffusion cloud removal at desk scale"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a paired clean/cloudy synthetic corpus with a manifest.
    Dataset(DatasetArgs),
    /// Cluster training pairs by difficulty and annotate the manifest.
    Group(GroupArgs),
    /// Train the model over the curriculum stages.
    Train(TrainArgs),
    /// Remove clouds from one image with a trained checkpoint.
    Remove(RemoveArgs),
    /// Score a manifest split with a trained checkpoint.
    Eval(EvalArgs),
    /// Sweep one inference knob over a value list from one checkpoint.
    Sweep(SweepArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct DatasetArgs {
    /// Output directory for images and manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of clean/cloudy pairs.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Square image side (multiple of 4).
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Fraction of thin-cloud pairs; the rest are thick.
    #[arg(long, default_value_t = 0.5)]
    pub thin_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overwrite a non-empty output directory.
    #[arg(long, default_value_t = false)]
    pub force: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct GroupArgs {
    /// Manifest to annotate in place.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Number of difficulty groups (1..=3).
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Complexity-score weight on MSE.
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    /// Complexity-score weight on (1 - SSIM).
    #[arg(long, default_value_t = 1.0)]
    pub lambda2: f64,
    /// Per-sample report CSV (id, score, group).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EnableFlag {
    Lora,
    Control,
    Freeu,
    StyleLoss,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON run configuration; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Explicit epochs per stage, e.g. "2,5,8"; default splits the epoch
    /// budget proportionally to group sizes.
    #[arg(long)]
    pub stages: Option<String>,
    /// Feature switches; listing any disables the rest.
    #[arg(long, value_enum, num_args = 1..)]
    pub enable: Option<Vec<EnableFlag>>,
    /// Output directory (checkpoint.dc4c, loss.csv, run.json).
    #[arg(long, default_value = "train-out")]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptArg {
    Thin,
    Thick,
}

impl From<PromptArg> for PromptCondition {
    fn from(p: PromptArg) -> Self {
        match p {
            PromptArg::Thin => PromptCondition::Thin,
            PromptArg::Thick => PromptCondition::Thick,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct RemoveArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Cloudy input image (PNG or PPM).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, value_enum)]
    pub prompt: PromptArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Guidance scale (>= 1).
    #[arg(long)]
    pub scale: Option<f64>,
    /// Control-branch strength.
    #[arg(long)]
    pub strength: Option<f64>,
    /// Adapter scaling.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// FreeU parameters "s1,s2,b1,b2".
    #[arg(long)]
    pub freeu: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output PNG path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "eval.csv")]
    pub out_csv: PathBuf,
    #[arg(long, default_value = "eval.json")]
    pub out_json: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Alpha,
    Scale,
    Strength,
    Freeu,
}

#[derive(Debug, Args, Serialize)]
pub struct SweepArgs {
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Values to sweep; for freeu each value is "s1,s2,b1,b2".
    #[arg(long, num_args = 1..)]
    pub values: Vec<String>,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output CSV of (value, psnr_mean, ssim_mean, pd_mean).
    #[arg(long, default_value = "sweep.csv")]
    pub out: PathBuf,
}

/// Runs the parsed command; errors here are runtime failures (exit 1).
pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Dataset(a) => cmd_dataset(a),
        Command::Group(a) => cmd_group(a),
        Command::Train(a) => cmd_train(a),
        Command::Remove(a) => cmd_remove(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

/// Parses argv and runs; returns the process exit code.
pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            // clap reserves 2 for usage errors and 0 for help/version
            let _ = e.print();
            return e.exit_code() as i32;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn args_json<T: Serialize>(args: &T) -> serde_json::Value {
    serde_json::to_value(args).unwrap_or(serde_json::Value::Null)
}

fn cmd_dataset(args: DatasetArgs) -> Result<()> {
    let manifest = gen_corpus(args.seed, args.n, args.size, args.thin_fraction, &args.out, args.force)?;
    let record = RunRecord {
        command: "dataset".to_string(),
        config: RunConfig::default(),
        args: args_json(&args),
    };
    record.write(&args.out)?;
    println!(
        "wrote {} pairs ({} train / {} test) under {}",
        manifest.entries.len(),
        manifest.train().count(),
        manifest.test().count(),
        args.out.display()
    );
    Ok(())
}

fn cmd_group(args: GroupArgs) -> Result<()> {
    let mut manifest = CorpusManifest::load(&args.manifest)?;
    group_corpus(&mut manifest, args.k, args.seed, args.lambda1, args.lambda2)?;
    manifest.save(&args.manifest)?;
    if let Some(report) = &args.report {
        let ctx = || format!("writing report {}", report.display());
        let mut f = std::fs::File::create(report).map_err(|e| Error::io(ctx(), e))?;
        writeln!(f, "id,score,group").map_err(|e| Error::io(ctx(), e))?;
        for e in manifest.train() {
            writeln!(
                f,
                "{},{},{}",
                e.id,
                e.score.unwrap_or(f64::NAN),
                e.group.unwrap_or(0)
            )
            .map_err(|e| Error::io(ctx(), e))?;
        }
    }
    let dir = args
        .manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    RunRecord {
        command: "group".to_string(),
        config: RunConfig::default(),
        args: args_json(&args),
    }
    .write(&dir)?;
    let mut counts = vec![0usize; args.k];
    for e in manifest.train() {
        if let Some(g) = e.group {
            counts[g - 1] += 1;
        }
    }
    println!("grouped {} train pairs into {:?}", manifest.train().count(), counts);
    Ok(())
}

fn enables_from(flags: &Option<Vec<EnableFlag>>, base: TrainEnable) -> TrainEnable {
    match flags {
        None => base,
        Some(list) => TrainEnable {
            lora: list.contains(&EnableFlag::Lora),
            control: list.contains(&EnableFlag::Control),
            freeu: list.contains(&EnableFlag::Freeu),
            style_loss: list.contains(&EnableFlag::StyleLoss),
        },
    }
}

/// Stage plan from the manifest's group annotations (one stage over group 1
/// when ungrouped), or from an explicit epochs-per-stage list.
pub fn plan_from_manifest(
    manifest: &CorpusManifest,
    total_epochs: usize,
    stages_override: Option<&str>,
) -> Result<StagePlan> {
    let k = manifest
        .train()
        .filter_map(|e| e.group)
        .max()
        .unwrap_or(1);
    if let Some(s) = stages_override {
        let epochs: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("bad stage list {s:?}: {e}")))?;
        if epochs.len() != k {
            return Err(Error::Config(format!(
                "stage list has {} entries but the manifest has {k} groups",
                epochs.len()
            )));
        }
        return Ok(StagePlan {
            stages: epochs.into_iter().enumerate().map(|(i, e)| (vec![i + 1], e)).collect(),
        });
    }
    let mut sizes = vec![0usize; k];
    for e in manifest.train() {
        sizes[e.group.unwrap_or(1) - 1] += 1;
    }
    make_stage_plan(&sizes, total_epochs)
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    if let Some(v) = args.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = args.seed {
        cfg.train.seed = v;
    }
    if let Some(v) = args.batch {
        cfg.train.batch = v;
    }
    if let Some(v) = args.lr {
        cfg.train.lr = v;
    }
    cfg.enable = enables_from(&args.enable, cfg.enable);
    cfg.validate()?;
    let manifest = CorpusManifest::load(&args.manifest)?;
    let plan = plan_from_manifest(&manifest, cfg.train.epochs, args.stages.as_deref())?;
    std::fs::create_dir_all(&args.out)
        .map_err(|e| Error::io(format!("creating {}", args.out.display()), e))?;
    let mut net = UNet::new(UNetConfig {
        seed: cfg.train.seed,
        lora_alpha: cfg.sample.alpha,
        ..Default::default()
    })?;
    let loss_csv = args.out.join("loss.csv");
    train(&mut net, &manifest, &cfg.train, &plan, &cfg.enable, Some(&loss_csv))?;
    let ckpt = args.out.join("checkpoint.dc4c");
    net.save(&ckpt)?;
    RunRecord {
        command: "train".to_string(),
        config: cfg,
        args: args_json(&args),
    }
    .write(&args.out)?;
    println!("checkpoint {} and loss history {}", ckpt.display(), loss_csv.display());
    Ok(())
}

fn sample_overrides(
    cfg: &mut SampleConfig,
    scale: Option<f64>,
    strength: Option<f64>,
    alpha: Option<f64>,
    freeu: Option<&str>,
    steps: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    if let Some(v) = scale {
        cfg.scale = v;
    }
    if let Some(v) = strength {
        cfg.strength = v;
    }
    if let Some(v) = alpha {
        cfg.alpha = v;
    }
    if let Some(s) = freeu {
        cfg.freeu = s.parse()?;
    }
    if let Some(v) = steps {
        cfg.steps = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    cfg.validate()
}

fn cmd_remove(args: RemoveArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    cfg.sample.prompt = args.prompt.into();
    sample_overrides(
        &mut cfg.sample,
        args.scale,
        args.strength,
        args.alpha,
        args.freeu.as_deref(),
        args.steps,
        args.seed,
    )?;
    let net = UNet::load(&args.checkpoint)?;
    let cloudy = load_image(&args.input)?;
    let output = remove_clouds(&net, &cloudy, &cfg.sample)?;
    save_image(&output, &args.out)?;
    let dir = args
        .out
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    RunRecord {
        command: "remove".to_string(),
        config: cfg,
        args: args_json(&args),
    }
    .write(&dir)?;
    println!("wrote {}", args.out.display());
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(args.config.as_deref())?;
    sample_overrides(&mut cfg.sample, None, None, None, None, args.steps, args.seed)?;
    let net = UNet::load(&args.checkpoint)?;
    let manifest = CorpusManifest::load(&args.manifest)?;
    let (rows, summary) = evaluate(&net, &manifest, args.split.into(), &cfg.sample)?;
    diffusion::write_eval_reports(&rows, &summary, &args.out_csv, &args.out_json)?;
    let dir = args
        .out_csv
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    RunRecord {
        command: "eval".to_string(),
        config: cfg,
        args: args_json(&args),
    }
    .write(&dir)?;
    println!(
        "n={} psnr_mean={:.4} ssim_mean={:.4} pd_mean={:.6}",
        summary.n, summary.psnr_mean, summary.ssim_mean, summary.pd_mean
    );
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    if args.values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".to_string()));
    }
    let base = load_config(args.config.as_deref())?;
    let net = UNet::load(&args.checkpoint)?;
    let manifest = CorpusManifest::load(&args.manifest)?;
    let ctx = || format!("writing sweep {}", args.out.display());
    let mut f = std::fs::File::create(&args.out).map_err(|e| Error::io(ctx(), e))?;
    writeln!(f, "value,psnr_mean,ssim_mean,pd_mean").map_err(|e| Error::io(ctx(), e))?;
    for value in &args.values {
        let mut cfg = base.sample.clone();
        if let Some(v) = args.steps {
            cfg.steps = v;
        }
        if let Some(v) = args.seed {
            cfg.seed = v;
        }
        let parse_f64 = |v: &str| -> Result<f64> {
            v.parse::<f64>()
                .map_err(|e| Error::Config(format!("bad sweep value {v:?}: {e}")))
        };
        match args.param {
            SweepParam::Alpha => cfg.alpha = parse_f64(value)?,
            SweepParam::Scale => cfg.scale = parse_f64(value)?,
            SweepParam::Strength => cfg.strength = parse_f64(value)?,
            SweepParam::Freeu => cfg.freeu = value.parse()?,
        }
        cfg.validate()?;
        let (_, summary) = evaluate(&net, &manifest, args.split.into(), &cfg)?;
        // RFC 4180: quote the value field since freeu values contain commas
        writeln!(
            f,
            "\"{}\",{},{},{}",
            value, summary.psnr_mean, summary.ssim_mean, summary.pd_mean
        )
        .map_err(|e| Error::io(ctx(), e))?;
    }
    let dir = args
        .out
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    RunRecord {
        command: "sweep".to_string(),
        config: base,
        args: args_json(&args),
    }
    .write(&dir)?;
    println!("wrote {}", args.out.display());
    Ok(())
}
