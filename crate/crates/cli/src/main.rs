//! `idleak` command-line workflows.

mod config;
mod invert_cmd;
mod probe_cmd;
mod report_cmd;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use idleak::data_ingest::gen_toy_dataset;
use idleak::probes::ProbeKind;
use idleak::{Error, Result};

use crate::config::RunConfig;
use crate::invert_cmd::TargetSource;
use crate::workspace::{progress, Workspace};

#[derive(Parser)]
#[command(name = "idleak", version, about = "Probe face-identity descriptors for non-identity leakage and invert them")]
struct Cli {
    /// JSON run configuration. Relative paths inside it resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output root, overriding the config's output_dir.
    #[arg(long, global = true, env = "IDLEAK_OUT")]
    out: Option<PathBuf>,
    /// Seed, overriding the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Binary,
    LandmarksFromId,
    HistogramFromId,
    LandmarksFromImage,
}

impl From<KindArg> for ProbeKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Binary => ProbeKind::Binary,
            KindArg::LandmarksFromId => ProbeKind::LandmarksFromId,
            KindArg::HistogramFromId => ProbeKind::HistogramFromId,
            KindArg::LandmarksFromImage => ProbeKind::LandmarksFromImage,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the toy dataset described by dataset.toy.
    GenToyData,
    /// Train a probe on the training split.
    TrainProbe {
        #[arg(long, value_enum)]
        kind: KindArg,
    },
    /// Evaluate a trained probe on the test split and print its table row.
    EvalProbe {
        #[arg(long, value_enum)]
        kind: KindArg,
    },
    /// Train the descriptor-to-latent initialization regressor.
    TrainInit,
    /// Reconstruct faces from descriptors.
    Invert {
        /// Descriptor JSON file to invert.
        #[arg(long, conflicts_with = "image")]
        descriptor: Option<PathBuf>,
        /// Image to embed and invert. Only its descriptor reaches the optimizer.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Run the ID, ID+landmark and ID+landmark+histogram objectives side by side.
        #[arg(long)]
        ablation: bool,
    },
    /// Summarize inversion results and probe metrics.
    Report,
}

/// 0 success, 1 usage or configuration, 2 missing dependency or artifact,
/// 3 optimization divergence.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Dependency(_) => 2,
        Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 2,
        Error::Divergence { .. } => 3,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let config_path = cli
        .config
        .ok_or_else(|| Error::Usage("--config is required".into()))?;
    let loaded = RunConfig::load(&config_path)?;
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Usage("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot start worker pool: {e}")))?;
    }
    let ws = Workspace::new(loaded, cli.out, cli.seed);
    match cli.command {
        Command::GenToyData => {
            let toy = ws.config.dataset.toy.clone().ok_or_else(|| {
                Error::Config("gen-toy-data needs a dataset.toy section".into())
            })?;
            let dir = ws.data_dir();
            ws.prepare_output(&dir)?;
            let manifest = gen_toy_dataset(&dir, &toy, ws.seed())?;
            progress(format!("wrote {} records to {}", manifest.records.len(), dir.display()));
            println!("manifest fingerprint {}", manifest.fingerprint);
        }
        Command::TrainProbe { kind } => probe_cmd::train(&ws, kind.into())?,
        Command::EvalProbe { kind } => {
            probe_cmd::eval(&ws, kind.into())?;
        }
        Command::TrainInit => invert_cmd::train_init(&ws)?,
        Command::Invert {
            descriptor,
            image,
            ablation,
        } => {
            let source = match (descriptor, image) {
                (Some(d), _) => TargetSource::Descriptor(d),
                (None, Some(i)) => TargetSource::Image(i),
                (None, None) => TargetSource::Toy,
            };
            invert_cmd::run(&ws, &source, ablation)?;
        }
        Command::Report => report_cmd::run(&ws)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
