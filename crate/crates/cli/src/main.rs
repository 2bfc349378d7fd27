use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context as _, Result};
use clap::{Args, Parser, Subcommand};
use cvmcl_cli::config::RunConfig;
use cvmcl_cli::pipeline::{self, EmbedderChoice, EmbedderKind, LocalizeOptions, ProviderKind, Region, Workspace};

#[derive(Parser)]
#[command(name = "cvmcl", version, about = "Cross-view particle-filter localization on synthetic worlds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the top-level seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedderArgs {
    #[arg(long, value_enum, default_value = "model")]
    embedder: EmbedderKind,
    /// Checkpoint to use instead of <out>/model.cvsm.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl EmbedderArgs {
    fn choice(&self) -> EmbedderChoice {
        EmbedderChoice {
            kind: self.embedder,
            model: self.model.clone(),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate worlds and trajectories.
    Simgen,
    /// Mine positive and negative training pairs.
    Mine,
    /// Train the two-branch encoder.
    Train,
    /// Embed every grid pose of a region.
    Index {
        #[arg(long, value_enum, default_value = "eval")]
        region: Region,
        #[command(flatten)]
        embedder: EmbedderArgs,
    },
    /// Precision-recall and top-X retrieval metrics.
    EvalRetrieval {
        #[arg(long, value_enum, default_value = "eval")]
        region: Region,
        #[command(flatten)]
        embedder: EmbedderArgs,
    },
    /// Run the particle filter on the evaluation trajectories.
    Localize {
        #[arg(long, value_enum, default_value = "index")]
        provider: ProviderKind,
        #[command(flatten)]
        embedder: EmbedderArgs,
        /// Number of runs; eval.runs when absent.
        #[arg(long)]
        seeds: Option<usize>,
        /// Output subdirectory under localize/.
        #[arg(long)]
        tag: Option<String>,
        /// Write the particle cloud after every step.
        #[arg(long)]
        dump_clouds: bool,
    },
    /// Aggregate retrieval and localization results.
    Report,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    }
    .resolve(cli.common.seed)?;
    let ws = Workspace::new(cfg, &cli.common.out)?;
    match cli.command {
        Command::Simgen => pipeline::simgen(&ws)?,
        Command::Mine => {
            let s = pipeline::mine(&ws)?;
            log::info!("mined {} positives, {} negatives", s.positives, s.negatives);
        }
        Command::Train => {
            let r = pipeline::train(&ws)?;
            log::info!("best epoch {}", r.best_epoch);
        }
        Command::Index { region, embedder } => {
            let idx = pipeline::index(&ws, region, &embedder.choice())?;
            log::info!("indexed {} poses", idx.len());
        }
        Command::EvalRetrieval { region, embedder } => {
            let r = pipeline::eval_retrieval(&ws, region, &embedder.choice())?;
            println!("{}", cvmcl::io::canonical_json(&r)?.trim_end());
        }
        Command::Localize {
            provider,
            embedder,
            seeds,
            tag,
            dump_clouds,
        } => {
            let opts = LocalizeOptions {
                provider,
                embedder: embedder.choice(),
                runs: seeds.unwrap_or(ws.cfg.eval.runs),
                tag,
                dump_clouds,
            };
            let runs = pipeline::localize(&ws, &opts)?;
            let s = pipeline::summarize_runs(&runs)?;
            println!("{}", cvmcl::io::canonical_json(&s)?.trim_end());
        }
        Command::Report => {
            let s = pipeline::report(&ws)?;
            println!("{}", cvmcl::io::canonical_json(&s)?.trim_end());
        }
    }
    Ok(())
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    use cvmcl::error::Error;
    for cause in e.chain() {
        if cause.is::<pipeline::FingerprintMismatch>() {
            return "fingerprint_mismatch";
        }
        if cause.is::<toml::de::Error>() {
            return "config";
        }
        if let Some(err) = cause.downcast_ref::<Error>() {
            return err.kind();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "error"
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("CVMCL_THREADS") {
        let n: usize = v.parse().with_context(|| format!("CVMCL_THREADS={v} is not a thread count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = serde_json::json!({
                "error": {
                    "kind": error_kind(&e),
                    "message": format!("{e:#}"),
                }
            });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
