mod config;

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use specalign::data::{generate_dataset, load_dataset, DatasetConfig, PairedSet, Split};
use specalign::diagnostics::{evaluate_alignment, export_embeddings, DEFAULT_EXPORT_COUNT};
use specalign::losses::LossTerm;
use specalign::model::{ModalityId, Model, Variant};
use specalign::probe::{run_probe, ProbeConfig};
use specalign::trainer::{
    load_for_eval, read_meta, CheckpointMeta, Container, MetricRecord, StageConfig, StageId,
    StageRunner, TrainState,
};

use crate::config::FileConfig;

#[derive(Parser)]
#[command(
    name = "specalign",
    version,
    about = "Align multispectral bands to a frozen RGB backbone"
)]
struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Accepted for scripts; every command is already deterministic.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory (generate, train) or file (eval, export-embeddings,
    /// probe, inspect-checkpoint; stdout when omitted).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic paired dataset.
    Generate(GenerateArgs),
    /// Run training stages in order.
    Train(TrainArgs),
    /// Alignment report on a dataset split.
    Eval(EvalArgs),
    /// Write CLS embeddings of sampled pairs as CSV.
    ExportEmbeddings(ExportArgs),
    /// Linear probe on concat-fused CLS features.
    Probe(ProbeArgs),
    /// Print checkpoint metadata and checksums.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    scenes: Option<usize>,
    /// Train, val and test fractions.
    #[arg(long, value_delimiter = ',')]
    split: Option<Vec<f64>>,
    /// Fraction of scenes with a NIR, SWIR and LWIR render.
    #[arg(long, value_delimiter = ',')]
    modality_ratios: Option<Vec<f64>>,
    #[arg(long)]
    image_size: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by `generate`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long, value_delimiter = ',', default_value = "I,II,III")]
    stages: Vec<String>,
    /// Loss terms removed for the whole run.
    #[arg(long, value_delimiter = ',')]
    disable_loss: Vec<String>,
    /// Runner checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Best checkpoint of the stage preceding the first requested one.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Print the resolved stage configurations and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args)]
struct ModelSource {
    /// Checkpoint to evaluate; without it a freshly initialized model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Variant of the freshly initialized model.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct ExportArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "val")]
    split: String,
    /// Pairs per band.
    #[arg(long, default_value_t = DEFAULT_EXPORT_COUNT)]
    count: usize,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    model: ModelSource,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "nir,swir,lwir")]
    bands: Vec<String>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Split the classifier is scored on; it trains on `train`.
    #[arg(long, default_value = "val")]
    split: String,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
}

struct Ctx {
    file: FileConfig,
    seed: u64,
    seed_flag: Option<u64>,
    out: Option<PathBuf>,
}

impl Ctx {
    fn variant(&self, flag: Option<&str>) -> Result<Variant> {
        Ok(flag
            .or(self.file.variant.as_deref())
            .unwrap_or("toy")
            .parse()?)
    }

    /// Writes `text` to `--out` or stdout.
    fn emit(&self, text: &str) -> Result<()> {
        match &self.out {
            Some(path) => {
                fs::write(path, text).with_context(|| format!("writing {}", path.display()))
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                stdout.write_all(text.as_bytes())?;
                Ok(stdout.flush()?)
            }
        }
    }

    fn out_dir(&self) -> Result<&Path> {
        self.out.as_deref().context("--out <DIR> is required")
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let file = FileConfig::load(cli.config.as_deref())?;
    let ctx = Ctx {
        seed: cli.seed.or(file.seed).unwrap_or(0),
        seed_flag: cli.seed,
        file,
        out: cli.out,
    };
    match cli.command {
        Command::Generate(a) => cmd_generate(&ctx, a),
        Command::Train(a) => cmd_train(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::ExportEmbeddings(a) => cmd_export(&ctx, a),
        Command::Probe(a) => cmd_probe(&ctx, a),
        Command::InspectCheckpoint(a) => cmd_inspect(&ctx, a),
    }
}

fn triple(flag: &str, v: Option<Vec<f64>>, fallback: [f64; 3]) -> Result<[f64; 3]> {
    match v {
        None => Ok(fallback),
        Some(v) => <[f64; 3]>::try_from(v.as_slice()).map_err(|_| {
            anyhow::anyhow!(
                "--{flag} takes three comma-separated values, got {}",
                v.len()
            )
        }),
    }
}

fn cmd_generate(ctx: &Ctx, a: GenerateArgs) -> Result<()> {
    let base = ctx.file.dataset.clone().unwrap_or_default();
    let cfg = DatasetConfig {
        scenes: a.scenes.unwrap_or(base.scenes),
        seed: match (ctx.seed_flag, &ctx.file.dataset) {
            (None, Some(d)) => d.seed,
            _ => ctx.seed,
        },
        image_size: a.image_size.unwrap_or(base.image_size),
        split: triple("split", a.split, base.split)?,
        modality_ratios: triple("modality-ratios", a.modality_ratios, base.modality_ratios)?,
    };
    let dir = ctx.out_dir()?;
    let manifest = generate_dataset(&cfg, dir)?;
    eprintln!(
        "wrote {} scenes to {}",
        manifest.scenes.len(),
        dir.display()
    );
    Ok(())
}

fn parse_stages(names: &[String]) -> Result<Vec<StageId>> {
    let mut stages = names
        .iter()
        .map(|s| s.parse())
        .collect::<specalign::Result<Vec<StageId>>>()?;
    stages.sort();
    stages.dedup();
    ensure!(!stages.is_empty(), "no stages requested");
    ensure!(
        stages.windows(2).all(|w| w[1].index() == w[0].index() + 1),
        "stages must be consecutive, got {stages:?}"
    );
    Ok(stages)
}

fn stage_configs(
    ctx: &Ctx,
    variant: Variant,
    stages: &[StageId],
    disabled: &[LossTerm],
) -> Result<Vec<StageConfig>> {
    stages
        .iter()
        .map(|&s| {
            let mut cfg = StageConfig::preset(variant, s);
            ctx.file.apply(&mut cfg)?;
            cfg.weights.disable(disabled);
            cfg.validate(variant.model_config().depth)?;
            Ok(cfg)
        })
        .collect()
}

fn ckpt_path(dir: &Path, s: StageId) -> PathBuf {
    dir.join(format!("stage-{s}.ckpt"))
}

fn read_container(path: &Path) -> Result<Container> {
    Container::read(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn cmd_train(ctx: &Ctx, a: TrainArgs) -> Result<()> {
    let variant = ctx.variant(a.variant.as_deref())?;
    let stages = parse_stages(&a.stages)?;
    let disabled = a
        .disable_loss
        .iter()
        .map(|s| s.parse())
        .collect::<specalign::Result<Vec<LossTerm>>>()?;
    let cfgs = stage_configs(ctx, variant, &stages, &disabled)?;
    if a.print_config {
        return ctx.emit(&format!("{}\n", serde_json::to_string_pretty(&cfgs)?));
    }
    let model_cfg = variant.model_config();
    let dir = ctx.out_dir()?.to_path_buf();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let bands = ModalityId::MULTISPECTRAL;
    let train = load_dataset(&a.data, Some(Split::Train), &bands)?;
    let val = load_dataset(&a.data, Some(Split::Val), &bands)?;
    ensure!(
        train.image_size == model_cfg.image_size,
        "dataset images are {0}x{0} but variant {variant} expects {1}x{1}",
        train.image_size,
        model_cfg.image_size
    );

    // Either a runner checkpoint to continue, or the state the first stage starts from.
    let resumed = match &a.resume {
        Some(path) => {
            let c = read_container(path)?;
            let stage = read_meta(&c)?.stage;
            ensure!(
                stages.contains(&stage),
                "checkpoint is mid stage {stage}, which --stages does not include"
            );
            Some((stage, c))
        }
        None => None,
    };
    let first = resumed.as_ref().map_or(stages[0], |(s, _)| *s);
    let mut state = match (first.previous(), &resumed) {
        (_, Some(_)) => None,
        (None, None) => Some(TrainState::new(
            &model_cfg,
            ctx.seed,
            cfgs[0].queue_capacity,
        )?),
        (Some(prev), None) => {
            let path = a.init.clone().unwrap_or_else(|| ckpt_path(&dir, prev));
            if !path.exists() {
                bail!("stage {first} needs a stage {prev} checkpoint: pass --init or include {prev} in --stages");
            }
            let c = read_container(&path)?;
            let meta = read_meta(&c)?;
            ensure!(
                meta.stage == prev,
                "{} holds a stage {} checkpoint, expected stage {prev}",
                path.display(),
                meta.stage
            );
            Some(TrainState::from_container(&c)?)
        }
    };

    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = BufWriter::new(
        OpenOptions::new()
            .create(true)
            .write(true)
            .append(resumed.is_some())
            .truncate(resumed.is_none())
            .open(&metrics_path)
            .with_context(|| format!("opening {}", metrics_path.display()))?,
    );
    let resume_path = dir.join("resume.ckpt");

    for cfg in cfgs.into_iter().filter(|c| c.stage >= first) {
        let stage = cfg.stage;
        let mut runner = match (state.take(), &resumed) {
            (Some(s), _) => StageRunner::start(s, cfg, &train, &val)?,
            (None, Some((_, c))) => StageRunner::resume(c, cfg, &train, &val)?,
            (None, None) => unreachable!("a starting state exists"),
        };
        eprintln!("stage {stage}: {} steps", runner.total_steps());
        while let Some(records) = runner.step()? {
            let epoch_end = records.iter().any(|r| matches!(r, MetricRecord::Eval(_)));
            for r in &records {
                writeln!(metrics, "{}", r.to_json())?;
            }
            if epoch_end {
                metrics.flush()?;
                runner.checkpoint().write_atomic(&resume_path)?;
            }
        }
        let outcome = runner.finish()?;
        outcome
            .best_checkpoint
            .write_atomic(&ckpt_path(&dir, stage))?;
        eprintln!(
            "stage {stage}: best epoch {} (mean top-1 {:.3}, val loss {:.4})",
            outcome.best.epoch, outcome.best.mean_top1, outcome.best.val_loss
        );
        state = Some(TrainState::from_container(&outcome.best_checkpoint)?);
    }
    metrics.flush()?;
    Ok(())
}

fn split_arg(s: &str) -> Result<Split> {
    Ok(s.parse()?)
}

/// Model to evaluate and the stage tag it carries.
fn load_model(ctx: &Ctx, src: &ModelSource) -> Result<(Model, String)> {
    match &src.checkpoint {
        Some(path) => {
            let eval = load_for_eval(&read_container(path)?)?;
            Ok((eval.model, eval.meta.stage.to_string()))
        }
        None => {
            let variant = ctx.variant(src.variant.as_deref())?;
            Ok((
                Model::build(&variant.model_config(), ctx.seed)?,
                "init".into(),
            ))
        }
    }
}

fn load_split(dir: &Path, split: &str) -> Result<PairedSet> {
    let set = load_dataset(dir, Some(split_arg(split)?), &ModalityId::MULTISPECTRAL)?;
    ensure!(
        !set.is_empty(),
        "split {split} of {} has no pairs",
        dir.display()
    );
    Ok(set)
}

fn check_size(model: &Model, set: &PairedSet) -> Result<()> {
    ensure!(
        set.image_size == model.config.image_size,
        "dataset images are {0}x{0} but the model expects {1}x{1}",
        set.image_size,
        model.config.image_size
    );
    Ok(())
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let (model, tag) = load_model(ctx, &a.model)?;
    let set = load_split(&a.data, &a.split)?;
    check_size(&model, &set)?;
    let report = evaluate_alignment(&model, &set, Some(&tag))?;
    ctx.emit(&format!("{}\n", serde_json::to_string_pretty(&report)?))
}

fn cmd_export(ctx: &Ctx, a: ExportArgs) -> Result<()> {
    ensure!(a.count > 0, "--count must be positive");
    let (model, _) = load_model(ctx, &a.model)?;
    let set = load_split(&a.data, &a.split)?;
    check_size(&model, &set)?;
    ctx.emit(&export_embeddings(&model, &set, a.count, ctx.seed)?)
}

fn cmd_probe(ctx: &Ctx, a: ProbeArgs) -> Result<()> {
    let (model, tag) = load_model(ctx, &a.model)?;
    let train = load_split(&a.data, "train")?;
    let eval = load_split(&a.data, &a.split)?;
    check_size(&model, &train)?;
    let bands = a
        .bands
        .iter()
        .map(|s| s.parse())
        .collect::<specalign::Result<Vec<ModalityId>>>()?;
    let cfg = ProbeConfig {
        epochs: a.epochs,
        lr: a.lr,
        seed: ctx.seed,
        ..Default::default()
    };
    #[derive(Serialize)]
    struct Out {
        stage: String,
        #[serde(flatten)]
        report: specalign::probe::ProbeReport,
    }
    let report = run_probe(&model, &train, &eval, &bands, &cfg)?;
    ctx.emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(&Out { stage: tag, report })?
    ))
}

fn cmd_inspect(ctx: &Ctx, a: InspectArgs) -> Result<()> {
    let c = read_container(&a.checkpoint)?;
    let eval = load_for_eval(&c)?;
    #[derive(Serialize)]
    struct Out {
        meta: CheckpointMeta,
        segments: Vec<(String, usize)>,
        resumable: bool,
        params: usize,
        model_checksum: String,
        teacher_checksum: String,
        groups: std::collections::BTreeMap<String, String>,
    }
    let out = Out {
        segments: c
            .segments
            .iter()
            .map(|(k, v)| (k.clone(), v.len()))
            .collect(),
        resumable: c.has("runner"),
        params: eval.model.num_params(),
        model_checksum: eval.model.checksum(),
        teacher_checksum: eval.teacher.checksum(),
        groups: eval.model.group_checksums(),
        meta: eval.meta,
    };
    ctx.emit(&format!("{}\n", serde_json::to_string_pretty(&out)?))
}
