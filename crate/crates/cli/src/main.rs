use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use radiogen_cli::commands;
use radiogen_cli::config::{Overrides, RunConfig};
use radiogen_cli::exit_code;
use radiogen_core::{Error, Result};

#[derive(Parser)]
#[command(name = "radiogen", version, about = "Imaging-to-expression radiogenomics pipeline")]
struct Cli {
    /// TOML run configuration; defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Replace a non-empty output directory.
    #[arg(long, global = true)]
    overwrite: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort with planted associations.
    Synth {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build model-ready patient records from raw volumes, masks and expression.
    Preprocess {
        #[arg(long)]
        raw: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the encoder and write a checkpoint.
    Train {
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the cohort's test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        alpha: Option<f64>,
        /// Replace predictions by the true targets (pipeline self-test).
        #[arg(long, hide = true)]
        oracle: bool,
    },
    /// Compare two evaluation reports.
    Compare { a: PathBuf, b: PathBuf },
}

fn run(cli: Cli) -> Result<String> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(Error::config("--threads must be positive"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    }
    let alpha = match &cli.command {
        Command::Eval { alpha, .. } => *alpha,
        _ => None,
    };
    let overrides = Overrides { seed: cli.seed, alpha };
    let cfg = || RunConfig::resolve(cli.config.as_deref(), &overrides);
    match cli.command {
        Command::Synth { out } => commands::synth(&cfg()?, out, cli.overwrite),
        Command::Preprocess { raw, out } => commands::preprocess(&cfg()?, raw, out, cli.overwrite),
        Command::Train { cohort, out } => commands::train_cmd(&cfg()?, cohort, out, cli.overwrite),
        Command::Eval {
            checkpoint,
            cohort,
            out,
            oracle,
            ..
        } => commands::eval_cmd(&cfg()?, checkpoint, cohort, out, cli.overwrite, oracle),
        Command::Compare { a, b } => commands::compare(&a, &b),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(line) => {
            println!("{line}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = exit_code(&e);
            ExitCode::from(code as u8)
        }
    }
}
