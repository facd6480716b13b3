//! `mtrnet`: corpus generation, training, text removal and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, CommandFactory, Parser, Subcommand};
use log::info;
use mtrnet::datagen::{self, Split};
use mtrnet::evaluation;
use mtrnet::geometry;
use mtrnet::inference::{self, RemovalRequest};
use mtrnet::pipeline::{PreparedSample, MODEL_SIZE};
use mtrnet::training::{self, LoopOptions, Profile, Trainer};

use config::{resolve, RunConfig, UsageError};

#[derive(Parser)]
#[command(name = "mtrnet", version, about = "Mask-guided scene text removal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired corpus.
    Synth(SynthArgs),
    /// Train a generator/discriminator pair on a corpus.
    Train(TrainArgs),
    /// Remove all or selected text regions from an image (or a corpus).
    Infer(InferArgs),
    /// Score a checkpoint on a corpus split.
    Eval(EvalArgs),
}

#[derive(Args)]
struct Common {
    /// Flat key-value (TOML) configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Random seed (default: config file, then $MTR_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SynthArgs {
    /// Number of samples.
    #[arg(long)]
    n: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Directory of background photos (default: procedural backgrounds).
    #[arg(long, value_name = "DIR")]
    backgrounds: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct TrainArgs {
    /// Corpus directory written by `synth`.
    #[arg(long)]
    corpus: PathBuf,
    /// Directory for checkpoints, loss trace and the echoed config.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<Profile>,
    /// Corpus split to train on.
    #[arg(long, default_value = "train", value_parser = parse_split)]
    split: Split,
    /// Stop after this many total steps.
    #[arg(long)]
    steps: Option<u64>,
    /// Ablation: hide the mask from both networks.
    #[arg(long)]
    no_mask: bool,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    epoch_size: Option<u64>,
    #[arg(long)]
    lambda_l1: Option<f64>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    width_multiplier: Option<f64>,
    /// Continue from a training checkpoint (its training settings win).
    #[arg(long, value_name = "CKPT")]
    resume: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct InferArgs {
    /// Training checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Input image (PNG/JPEG).
    #[arg(long, requires = "regions", conflicts_with = "corpus")]
    image: Option<PathBuf>,
    /// Region file for `--image`.
    #[arg(long, requires = "image")]
    regions: Option<PathBuf>,
    /// Process every sample of a corpus instead; `--out` is then a directory.
    #[arg(long, value_name = "DIR")]
    corpus: Option<PathBuf>,
    /// Region indices to remove, e.g. `0,2,5` (default: all; empty: none).
    #[arg(long, value_parser = parse_select, conflicts_with = "corpus")]
    select: Option<Selection>,
    /// Return the raw generator output instead of compositing.
    #[arg(long)]
    raw: bool,
    /// Output image (or directory with `--corpus`).
    #[arg(long)]
    out: PathBuf,
    /// Also write an `input | mask | output` panel.
    #[arg(long, value_name = "FILE", conflicts_with = "corpus")]
    gallery: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    /// Training checkpoint.
    #[arg(long, required_unless_present = "identity")]
    ckpt: Option<PathBuf>,
    /// Score the unmodified input instead of a model (baseline).
    #[arg(long, conflicts_with = "ckpt")]
    identity: bool,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "val", value_parser = parse_split)]
    split: Split,
    /// Directory of per-image detector outputs `{id}.txt`.
    #[arg(long, value_name = "DIR")]
    detections: Option<PathBuf>,
    #[arg(long)]
    iou_threshold: Option<f64>,
    /// CSV report path.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Clone, Debug)]
struct Selection(Vec<usize>);

fn parse_select(s: &str) -> Result<Selection, String> {
    if s.trim().is_empty() {
        return Ok(Selection(Vec::new()));
    }
    s.split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|_| format!("`{p}` is not a region index")))
        .collect::<Result<_, _>>()
        .map(Selection)
}

fn parse_split(s: &str) -> Result<Split, String> {
    s.parse()
}

fn parse_profile(s: &str) -> Result<Profile, String> {
    s.parse()
}

fn resolved(common: &Common, profile: Option<Profile>, apply: impl FnOnce(&mut RunConfig)) -> anyhow::Result<RunConfig> {
    let mut cfg = resolve(common.config.as_deref(), profile, common.seed)?;
    apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

fn parent_dir(p: &Path) -> PathBuf {
    match p.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let cfg = resolved(&a.common, None, |c| {
        if let Some(b) = &a.backgrounds {
            c.background_dir = b.display().to_string();
        }
    })?;
    let manifest = datagen::generate_corpus(&cfg.render_spec(), a.n, &a.out)?;
    cfg.echo(&a.out)?;
    info!("wrote {} samples to {}", manifest.ids.len(), a.out.display());
    Ok(())
}

fn cmd_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = resolved(&a.common, a.profile, |c| {
        if a.no_mask {
            c.use_mask = false;
        }
        if let Some(v) = a.steps {
            c.max_steps = v;
        }
        if let Some(v) = a.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = a.epochs {
            c.epochs = v;
        }
        if let Some(v) = a.epoch_size {
            c.epoch_size = v;
        }
        if let Some(v) = a.lambda_l1 {
            c.lambda_l1 = v;
        }
        if let Some(v) = a.lr0 {
            c.lr0 = v;
        }
        if let Some(v) = a.width_multiplier {
            c.width_multiplier = v;
        }
    })?;
    if !a.corpus.join(datagen::MANIFEST_FILE).is_file() {
        bail!("{} is not a corpus directory (no {})", a.corpus.display(), datagen::MANIFEST_FILE);
    }
    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::<f32>::load(p)?;
            if t.config != cfg.training_config() {
                log::warn!("resuming with the training settings stored in {}", p.display());
            }
            cfg.set_training(&t.config);
            t
        }
        None => Trainer::new(cfg.training_config())?,
    };
    cfg.echo(&a.out)?;

    let samples = datagen::load_corpus(&a.corpus, a.split)?;
    if samples.is_empty() {
        bail!("split {:?} of {} is empty", a.split, a.corpus.display());
    }
    let corpus = samples
        .iter()
        .map(|s| PreparedSample::new(s, None, MODEL_SIZE))
        .collect::<Result<Vec<_>, _>>()?;
    drop(samples);
    info!(
        "training on {} samples from step {} ({} parameters in G, {} in D)",
        corpus.len(),
        trainer.step(),
        trainer.generator.network().parameter_count(),
        trainer.discriminator.network().parameter_count()
    );
    let opts = LoopOptions {
        checkpoint_dir: a.out.clone(),
        max_steps: cfg.max_steps(),
    };
    let outcome = trainer.run(&corpus, &opts, |r| {
        if r.step % 10 == 0 {
            info!(
                "step {} d_loss {:.4} g_adv {:.4} g_l1 {:.4} lr {:.3e}",
                r.step, r.d_loss, r.g_adv_loss, r.g_l1_loss, r.lr
            );
        }
    })?;
    info!(
        "{} steps done; final checkpoint {}",
        outcome.reports.len(),
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn cmd_infer(a: InferArgs) -> anyhow::Result<()> {
    let cfg = resolved(&a.common, None, |_| {})?;
    let generator = training::load_generator(&a.ckpt)?;
    if let Some(corpus) = &a.corpus {
        let summary = inference::batch_remove(corpus, &generator, &a.out, !a.raw)?;
        cfg.echo(&a.out)?;
        info!("{} outputs written to {}", summary.succeeded.len(), a.out.display());
        if !summary.failed.is_empty() {
            for (id, e) in &summary.failed {
                eprintln!("{id}: {e}");
            }
            bail!("{} of {} samples failed", summary.failed.len(), summary.failed.len() + summary.succeeded.len());
        }
        return Ok(());
    }
    let (Some(image_path), Some(regions_path)) = (&a.image, &a.regions) else {
        return Err(UsageError("either --image with --regions, or --corpus, is required".into()).into());
    };
    let image = datagen::read_rgb(image_path)?;
    let (w, h) = image.dimensions();
    let regions = geometry::read_regions(regions_path, w, h)?;
    let mut req = RemovalRequest::new(image, regions);
    req.selected = a.select.map(|s| s.0);
    req.composite = !a.raw;
    let out = inference::remove_text(&req, &generator)?;
    datagen::save_png(&out, &a.out)?;
    if let Some(g) = &a.gallery {
        let mask = req.selected_regions()?.rasterize();
        datagen::save_png(&inference::gallery_panel(&req.image, &mask, &out), g)?;
    }
    cfg.echo(&parent_dir(&a.out))?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = resolved(&a.common, None, |c| {
        if let Some(t) = a.iou_threshold {
            c.iou_threshold = t;
        }
    })?;
    let report = if a.identity {
        evaluation::evaluate_model(&a.corpus, a.split, &inference::Identity, a.detections.as_deref(), cfg.iou_threshold)?
    } else {
        let ckpt = a.ckpt.as_ref().expect("clap enforces --ckpt");
        let g = training::load_generator(ckpt)?;
        evaluation::evaluate_model(&a.corpus, a.split, &g, a.detections.as_deref(), cfg.iou_threshold)?
    };
    std::fs::write(&a.out, report.to_csv()).with_context(|| format!("writing {}", a.out.display()))?;
    cfg.echo(&parent_dir(&a.out))?;
    println!("{}", report.aggregate_line());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            if let Some(u) = e.downcast_ref::<UsageError>() {
                let mut cmd = Cli::command();
                cmd.error(clap::error::ErrorKind::ValueValidation, u.to_string()).exit();
            }
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
