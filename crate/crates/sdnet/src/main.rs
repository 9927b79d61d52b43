use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use sdnet::checkpoint::Checkpoint;
use sdnet::dataset::{self, Split};
use sdnet::eval::{self, EvalOptions};
use sdnet::train::{self, BEST_FILE, CHECKPOINT_FILE};
use sdnet::{separate, RunConfig, UsageError};
use sdnet_core::Model;

#[derive(Parser)]
#[command(name = "sdnet", version, about = "Two-microphone speech separation with speaker and direction inference")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured beam width.
    #[arg(long)]
    beam: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate train/dev/test mixtures into the data directory.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Train, optionally resuming from a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Defaults to the best checkpoint of the configured run.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to the configured output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Separate a stereo WAV into one file per inferred source.
    Separate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(b) = c.beam {
        cfg.eval.beam_width = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Explicit path, else the run's best checkpoint, else its latest one.
fn checkpoint_path(cfg: &RunConfig, explicit: Option<PathBuf>) -> anyhow::Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    for name in [BEST_FILE, CHECKPOINT_FILE] {
        let p = cfg.train.run_dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    bail!("no checkpoint given and none found in {}", cfg.train.run_dir.display())
}

fn load_model(cfg: &RunConfig, path: &Path) -> anyhow::Result<(Model, Vec<f64>)> {
    let ck = Checkpoint::load(path)?;
    ck.ensure_model(&cfg.model)?;
    Ok((Model::new(ck.model)?, ck.params))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Command::Simulate { common } => {
            let cfg = load_config(&common)?;
            let root = cfg.data.resolved_dir();
            for p in dataset::simulate(&cfg, &root)? {
                println!("{}", p.display());
            }
        }
        Command::Train { common, checkpoint } => {
            let cfg = load_config(&common)?;
            let out = train::run(&cfg, checkpoint.as_deref())?;
            println!("stopped at step {} ({:?}); run directory {}", out.step, out.stop, out.run_dir.display());
        }
        Command::Eval { common, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let (model, params) = load_model(&cfg, &checkpoint_path(&cfg, checkpoint)?)?;
            let items = dataset::load_split(&cfg.data.resolved_dir(), Split::Test)?;
            let opts = EvalOptions {
                beam_width: cfg.eval.beam_width,
                sdr_filter_len: Some(cfg.eval.sdr_filter_len),
                oracle: cfg.eval.oracle,
            };
            let records = eval::evaluate(&model, &params, items.iter().map(|l| (l.entry.id.as_str(), &l.example)), &opts)?;
            let out_dir = out.unwrap_or(cfg.eval.out_dir.clone());
            let s = eval::write_report(&out_dir, &records)?;
            println!("{}", serde_json::to_string(&s)?);
        }
        Command::Separate { common, checkpoint, input, out } => {
            let cfg = load_config(&common)?;
            let (model, params) = load_model(&cfg, &checkpoint_path(&cfg, checkpoint)?)?;
            let sidecar = separate::separate_file(&model, &params, &input, &out, cfg.eval.beam_width)
                .with_context(|| format!("separating {}", input.display()))?;
            println!("{} source(s) written to {}", sidecar.sources.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<UsageError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
