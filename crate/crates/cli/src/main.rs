mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "acousticpose", version, about = "Music-sensed 3D pose estimation toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Write into a non-empty output directory.
    #[arg(long, global = true)]
    pub force: bool,
    /// Worker threads; all cores by default.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Store feature files as f64 so reloaded windows match in-memory ones bit for bit.
    #[arg(long, global = true)]
    pub f64: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BgmKindArg {
    /// The `[[bgm]]` tracks of the config.
    Config,
    /// A single repeating chirp, for the separability study.
    Chirp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CheckpointArg {
    Best,
    Last,
    Initial,
}

impl CheckpointArg {
    pub fn dir_name(self) -> &'static str {
        match self {
            CheckpointArg::Best => "best",
            CheckpointArg::Last => "last",
            CheckpointArg::Initial => "initial",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a synthetic dataset: audio, poses and manifest.json.
    Simulate {
        #[arg(long, value_enum, default_value = "config")]
        bgm_kind: BgmKindArg,
    },
    /// Turn a simulated dataset into standardized network windows.
    Featurize {
        /// Directory holding manifest.json.
        #[arg(long)]
        data: PathBuf,
    },
    /// Train a model on featurized windows.
    Train {
        /// Output of `featurize`.
        #[arg(long)]
        features: PathBuf,
        /// Overrides the configured epoch count; 0 only writes the initial checkpoint.
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from `<out>/last`.
        #[arg(long)]
        resume: bool,
    },
    /// Score a trained run on held-out windows.
    Eval {
        /// Output directory of `train`.
        #[arg(long)]
        run: PathBuf,
        /// Featurized windows; defaults to those the run was trained on.
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "best")]
        checkpoint: CheckpointArg,
        /// Score the ground truth against itself instead of model predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Finite-difference check of the full training loss on a tiny model.
    Gradcheck,
    /// PCA and silhouette of features sensed with a chirp versus music.
    PcaStudy,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    if let Some(n) = cli.global.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot size thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let g = &cli.global;
    let result = match cli.command {
        Command::Simulate { bgm_kind } => commands::simulate(g, bgm_kind),
        Command::Featurize { data } => commands::featurize(g, &data),
        Command::Train { features, epochs, resume } => commands::train(g, &features, epochs, resume),
        Command::Eval {
            run,
            features,
            checkpoint,
            oracle,
        } => commands::eval(g, &run, features.as_deref(), checkpoint, oracle),
        Command::Gradcheck => commands::gradcheck(g),
        Command::PcaStudy => commands::pca_study(g),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
