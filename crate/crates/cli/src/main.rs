use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pfcl_core::experiment::{curves_from_files, parse_spec_with, run_experiment, summarize};
use pfcl_core::io::write_atomic;
use pfcl_core::Result;

/// Continual learning experiments with distillation on auxiliary data.
///
/// Set PFCL_WORKERS to bound the number of runs trained concurrently and
/// RUST_LOG=info for per-epoch progress.
#[derive(Parser)]
#[command(name = "pfcl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (method, seed) pair of a spec and write results.
    Run {
        spec: PathBuf,
        /// Override a spec value, e.g. `--set train.lr=0.01`.
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
        /// Output directory; replaces `experiment.output`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a spec without training.
    Validate {
        spec: PathBuf,
        #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
        set: Vec<String>,
    },
    /// Running-accuracy curves from matrix CSVs, grouped by method.
    Curves {
        #[arg(required = true)]
        matrices: Vec<PathBuf>,
        /// Write to this file instead of stdout.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Rebuild summary.csv from a run directory.
    Summarize { dir: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run { spec, set, out } => {
            let mut spec = parse_spec_with(&spec, &set)?;
            if let Some(out) = out {
                spec.output = out;
            }
            let report = run_experiment(&spec)?;
            for s in &report.summaries {
                println!(
                    "{}\tseed {}\tacc {:.4}\tforget {}",
                    s.method,
                    s.seed,
                    s.acc,
                    s.forget.map_or("-".to_string(), |f| format!("{f:.4}"))
                );
            }
            println!("results in {}", spec.output.display());
        }
        Command::Validate { spec, set } => {
            let spec = parse_spec_with(&spec, &set)?;
            println!(
                "ok: {} method(s), {} seed(s), output {}",
                spec.methods.len(),
                spec.seeds.len(),
                spec.output.display()
            );
        }
        Command::Curves { matrices, output } => {
            let csv = curves_from_files(&matrices)?;
            match output {
                Some(p) => write_atomic(&p, csv.as_bytes())?,
                None => print!("{csv}"),
            }
        }
        Command::Summarize { dir } => print!("{}", summarize(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
