use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use weakreg::harness;

#[derive(Parser)]
#[command(name = "weakreg", version, about = "Label-driven 3D image registration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom corpus with ground-truth fields.
    Synth {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a network on a corpus manifest.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict the displacement field for an image pair.
    Register {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        moving: PathBuf,
        #[arg(long)]
        fixed: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write the warped moving image here.
        #[arg(long)]
        warped: Option<PathBuf>,
    },
    /// Apply a stored displacement field to a volume or label.
    Warp {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        ddf: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on the held-out cases of a corpus.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Write Jacobian, magnitude and gradient-norm maps of a field.
    Inspect {
        #[arg(long)]
        ddf: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> weakreg::Result<()> {
    match cli.command {
        Command::Synth { spec, out } => {
            let manifest = harness::synth_command(spec.as_deref(), &out)?;
            println!("{}", manifest.display());
        }
        Command::Train { config, corpus, out } => {
            let outcome = harness::train_command(config.as_deref(), &corpus, &out)?;
            if let Some(last) = outcome.trace.last() {
                println!(
                    "iteration {}: similarity {:.4} total {:.4}",
                    last.iteration, last.similarity, last.total
                );
            }
        }
        Command::Register {
            checkpoint,
            moving,
            fixed,
            out,
            warped,
        } => harness::register_command(&checkpoint, &moving, &fixed, &out, warped.as_deref())?,
        Command::Warp { input, ddf, out } => harness::warp_command(&input, &ddf, &out)?,
        Command::Evaluate {
            checkpoint,
            corpus,
            report,
            maps,
        } => {
            let r = harness::evaluate_command(&checkpoint, &corpus, &report, maps.as_deref())?;
            print!("{}", r.percentile_csv());
        }
        Command::Inspect { ddf, out } => {
            let s = harness::inspect_command(&ddf, &out)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
