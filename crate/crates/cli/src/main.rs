use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rankprune::cli::{self, EvalData};
use rankprune::{Error, ErrorClass};

#[derive(Parser)]
#[command(name = "rankprune", version, about = "Train, evaluate and analyze SVD-factorized CNNs with rank pruning")]
struct Args {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write reports plus checkpoints.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory, overriding `out_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// `train`, `heldout`, or `cifar10:<file>[,<file>...]`.
        #[arg(long)]
        data: String,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Per-layer rank and singular value report of a checkpoint.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        /// CSV destination (default: `<ckpt>/analysis.csv`).
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train once per regularization mode with a shared seed.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn threads() -> Result<usize, Error> {
    match std::env::var("DPRP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => v
            .parse()
            .map_err(|_| Error::Config(format!("DPRP_THREADS must be a non-negative integer, got `{v}`"))),
    }
}

fn run(args: Args) -> Result<(), Error> {
    let threads = threads()?;
    match args.command {
        Command::Train { config, out } => {
            let (dir, outcome) = cli::cmd_train(&config, out.as_deref(), threads)?;
            cli::emit(&cli::train_summary_text(&dir, &outcome));
        }
        Command::Eval { ckpt, data, format } => {
            let data: EvalData = data.parse()?;
            let report = cli::cmd_eval(&ckpt, &data)?;
            match format {
                Format::Text => cli::emit(&report.to_text()),
                Format::Json => cli::emit(&(report.to_json()? + "\n")),
            }
        }
        Command::Analyze { ckpt, csv } => {
            let csv = csv.unwrap_or_else(|| ckpt.join("analysis.csv"));
            let rows = cli::cmd_analyze(&ckpt, &csv)?;
            cli::emit(&cli::analysis_table(&rows));
        }
        Command::Ablate { config, out } => {
            let (_, rows) = cli::cmd_ablate(&config, out.as_deref(), threads)?;
            cli::emit(&cli::ablation_table(&rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Config => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
