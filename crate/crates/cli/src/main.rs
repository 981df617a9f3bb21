//! `warpadapt`: data generation, training, evaluation, translation
//! inspection and gradient self-checks.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

/// Exit status of a failed command.
#[derive(Debug)]
pub enum Failure {
    /// A self-check did not pass.
    Verification(String),
    /// Bad flags or configuration.
    Usage(String),
    /// Unreadable, malformed or unwritable data.
    Data(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Verification(_) => 1,
            Failure::Usage(_) => 2,
            Failure::Data(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Verification(m) | Failure::Usage(m) | Failure::Data(m) => m,
        }
    }
}

impl From<warpadapt::Error> for Failure {
    fn from(e: warpadapt::Error) -> Self {
        use warpadapt::Error as E;
        match e {
            E::Config(_) | E::Usage(_) => Failure::Usage(e.to_string()),
            E::Shape(_) | E::Format { .. } | E::Io { .. } | E::UndefinedMetric(_) => Failure::Data(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "warpadapt", version, about = "Domain-adaptive stereo and optical flow co-training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Direction {
    A2b,
    B2a,
    Cycle,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Split {
    RealVal,
    SynVal,
    Real,
    Syn,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic and shifted real-domain samples plus a manifest.
    Generate {
        #[arg(long)]
        out: PathBuf,
        /// Samples per domain.
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        max_disp: Option<f64>,
        #[arg(long)]
        max_flow: Option<f64>,
        /// identity, default or strong.
        #[arg(long)]
        shift_preset: Option<String>,
        /// Config file supplying the scene.* keys.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on a generated dataset; any config key can follow as `--key value`.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of a fresh state.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
        overrides: Vec<String>,
    },
    /// Print validation metrics of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "or")]
        d1_mode: warpadapt::metrics::D1Mode,
        #[arg(long, value_enum, default_value = "real-val")]
        split: Split,
        /// Count flow errors on non-occluded pixels only.
        #[arg(long)]
        noc: bool,
        /// Use ground truth in place of the task-network predictions.
        #[arg(long)]
        oracle: bool,
    },
    /// Translate one sample and write the images as PPM and tensor files.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum)]
        direction: Direction,
    },
    /// Finite-difference check of every kernel and loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(v) = std::env::var("WARPADAPT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Usage(format!("WARPADAPT_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Usage(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Generate {
            out,
            count,
            seed,
            width,
            height,
            max_disp,
            max_flow,
            shift_preset,
            config,
        } => {
            let overrides = [
                ("scene.count", count.map(|v| v.to_string())),
                ("scene.seed", seed.map(|v| v.to_string())),
                ("scene.width", width.map(|v| v.to_string())),
                ("scene.height", height.map(|v| v.to_string())),
                ("scene.max_disp", max_disp.map(|v| v.to_string())),
                ("scene.max_flow", max_flow.map(|v| v.to_string())),
                ("scene.shift_preset", shift_preset),
            ];
            let cfg = commands::load_config(config.as_deref(), overrides.iter().filter_map(|(k, v)| Some((*k, v.clone()?))))?;
            commands::generate(&cfg, &out)
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            overrides,
        } => {
            let pairs = commands::parse_overrides(&overrides)?;
            let cfg = commands::load_config(config.as_deref(), pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))?;
            commands::train(&cfg, &data, &out, resume.as_deref())
        }
        Command::Eval {
            checkpoint,
            data,
            d1_mode,
            split,
            noc,
            oracle,
        } => commands::eval(&checkpoint, &data, d1_mode, split, noc, oracle),
        Command::Translate {
            checkpoint,
            input,
            out,
            direction,
        } => commands::translate(&checkpoint, &input, &out, direction),
        Command::Gradcheck { seed } => commands::gradcheck(seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
