use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use fcos::config::ExperimentConfig;
use fcos::data::{ingest_external, Split};
use fcos::metrics::{count_params_flops, evaluate, format_pr, markdown_table};
use fcos::model::checkpoint::load_checkpoint;
use fcos::pipeline::{run_pipeline, Manifest, RunOptions, Stage};

#[derive(Parser, Debug)]
#[command(name = "fcos", version, about = "Fine-to-coarse pruning of 1D CNN signal classifiers")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed and dataset.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "FCOS_OUT")]
    out: Option<PathBuf>,
    /// Worker threads; 1 gives bitwise-reproducible runs.
    #[arg(long, global = true, default_value_t = 0)]
    workers: usize,
    /// Reuse the artifacts of an earlier run in this directory.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// With --resume: first stage to recompute; earlier stages must be reusable.
    #[arg(long, global = true)]
    stage: Option<StageArg>,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum StageArg {
    GenData,
    Train,
    PruneChannels,
    Lacd,
    Finetune,
    Baseline,
    Report,
}

impl From<StageArg> for Stage {
    fn from(s: StageArg) -> Stage {
        match s {
            StageArg::GenData => Stage::GenData,
            StageArg::Train => Stage::Train,
            StageArg::PruneChannels => Stage::PruneChannels,
            StageArg::Lacd => Stage::Lacd,
            StageArg::Finetune => Stage::Finetune,
            StageArg::Baseline => Stage::Baseline,
            StageArg::Report => Stage::Report,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate (or ingest) the dataset.
    GenData,
    /// Train the unpruned model.
    Train,
    /// Stage 1: similarity-clustered channel fusion.
    PruneChannels,
    /// Stage 2: warm fine-tune, probe, diagnose and remove collapsed units.
    Lacd,
    /// Final fine-tune of the LaCD output.
    Finetune,
    /// Prune and fine-tune the configured baseline.
    Baseline,
    /// Write the report and curve files.
    Report,
    /// Every stage in order.
    Run,
    /// Accuracy, per-SNR accuracy, params and FLOPs of a checkpoint.
    Evaluate {
        checkpoint: PathBuf,
        /// Dataset container; defaults to the one recorded in the output directory.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
}

fn load_config(g: &Global) -> Result<ExperimentConfig> {
    let mut cfg = match &g.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.train.seed = s;
        cfg.dataset.seed = s;
    }
    if let Some(o) = g.resume.as_ref().or(g.out.as_ref()) {
        cfg.output.dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn options(g: &Global, cfg: &ExperimentConfig, stop: Stage, reuse: bool) -> Result<RunOptions> {
    let start = match (&g.resume, g.stage) {
        (Some(_), Some(s)) => Some(Stage::from(s)),
        (Some(_), None) => Some(stop),
        (None, Some(_)) => bail!("--stage needs --resume <dir>"),
        (None, None) => None,
    };
    if let Some(s) = start {
        if s > stop {
            bail!("--stage {s} comes after {stop}");
        }
    }
    Ok(RunOptions {
        out: cfg.output.dir.clone(),
        stop,
        start,
        reuse,
        workers: g.workers,
    })
}

fn run_stage(g: &Global, stop: Stage, reuse: bool) -> Result<()> {
    let cfg = load_config(g)?;
    let opts = options(g, &cfg, stop, reuse)?;
    let out = run_pipeline(&cfg, &opts)?;
    for (stage, rec) in &out.manifest.stages {
        for f in rec.files.values() {
            println!("{stage}\t{}", out.out.join(&f.path).display());
        }
    }
    if !out.reports.is_empty() {
        print!("{}", markdown_table(&out.reports));
    }
    Ok(())
}

fn run_evaluate(g: &Global, checkpoint: &Path, dataset: Option<&PathBuf>, split: SplitArg) -> Result<()> {
    let (model, meta) = load_checkpoint(checkpoint)?;
    let ds_path = match dataset {
        Some(p) => p.clone(),
        None => {
            let dir = g
                .resume
                .clone()
                .or_else(|| g.out.clone())
                .or_else(|| checkpoint.parent().map(PathBuf::from))
                .unwrap_or_default();
            Manifest::load(&dir)?
                .artifact(&dir, Stage::GenData, "dataset")
                .with_context(|| format!("no dataset recorded in {}; pass --dataset", dir.display()))?
        }
    };
    let ds = ingest_external(&ds_path)?;
    if !meta.dataset_fingerprint.is_empty() && meta.dataset_fingerprint != ds.fingerprint() {
        log::warn!("checkpoint was trained on a different dataset");
    }
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let e = evaluate(&model, &ds, split)?;
    let (params, flops) = count_params_flops(&model, ds.length())?;
    println!("stage\t{}", meta.stage);
    println!("params\t{params}");
    println!("flops\t{flops}");
    println!("accuracy\t{:.4}\t({}/{})", e.accuracy, e.correct, e.total);
    for s in &e.per_snr {
        println!("snr {:>5.1}\t{:.4}", s.snr_db, s.accuracy);
    }
    info!("accuracy {}", format_pr(e.accuracy));
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = &cli.global;
    let res = match &cli.command {
        Command::GenData => run_stage(g, Stage::GenData, true),
        Command::Train => run_stage(g, Stage::Train, true),
        Command::PruneChannels => run_stage(g, Stage::PruneChannels, true),
        Command::Lacd => run_stage(g, Stage::Lacd, true),
        Command::Finetune => run_stage(g, Stage::Finetune, true),
        Command::Baseline => run_stage(g, Stage::Baseline, true),
        Command::Report => run_stage(g, Stage::Report, true),
        Command::Run => run_stage(g, Stage::Report, false),
        Command::Evaluate {
            checkpoint,
            dataset,
            split,
        } => run_evaluate(g, checkpoint, dataset.as_ref(), *split),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
