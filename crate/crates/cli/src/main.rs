use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nfem_cli::{run_with_progress, CliError, Command, RunConfig};

/// Nonlinear FEM surrogate toolkit.
#[derive(Parser)]
#[command(name = "nfem", version)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Solve random load cases and write a dataset.
    Generate(RunArgs),
    /// Train a U-Net surrogate on the training split.
    Train(RunArgs),
    /// Score a checkpoint on the test split and export VTK snapshots.
    Evaluate(RunArgs),
    /// Sweep a point load at one node and compare with FEM.
    Sweep(RunArgs),
    /// Compare node orderings of the dataset.
    AblateOrdering(RunArgs),
    /// Compare U-Net base widths.
    AblateChannels(RunArgs),
    /// Time FEM solves against U-Net inference.
    Bench(RunArgs),
    /// Print the fully resolved configuration.
    Config(RunArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Configuration file of `key = value` lines.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides such as `--train.epochs 75` or `--model.mode=vb`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    overrides: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn init_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("NFEM_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::config(None, format!("NFEM_THREADS must be a positive integer, got '{v}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::config(None, format!("cannot start thread pool: {e}")))
}

fn execute(sub: Sub) -> Result<(), CliError> {
    let (command, args) = match sub {
        Sub::Generate(a) => (Command::Generate, a),
        Sub::Train(a) => (Command::Train, a),
        Sub::Evaluate(a) => (Command::Evaluate, a),
        Sub::Sweep(a) => (Command::Sweep, a),
        Sub::AblateOrdering(a) => (Command::AblateOrdering, a),
        Sub::AblateChannels(a) => (Command::AblateChannels, a),
        Sub::Bench(a) => (Command::Bench, a),
        Sub::Config(a) => {
            let cfg = RunConfig::load(a.config.as_deref(), &a.overrides)?;
            print!("{}", cfg.echo());
            return Ok(());
        }
    };
    init_threads()?;
    let cfg = RunConfig::load(args.config.as_deref(), &args.overrides)?;
    let epochs = cfg.uint("train.epochs")?;
    let every = (epochs / 20).max(1);
    let outcome = run_with_progress(command, &cfg, &mut |r, secs| {
        if r.epoch % every == 0 || r.epoch + 1 == epochs {
            eprintln!(
                "epoch {:>5}  loss {:.6e}  kl {:.4e}  nll {:.4e}  ({secs:.1}s)",
                r.epoch + 1,
                r.loss,
                r.kl,
                r.nll
            );
        }
    })?;
    println!("{}", outcome.summary);
    for a in &outcome.artifacts {
        println!("  wrote {} ({} bytes)", a.name, a.bytes);
    }
    println!("  manifest {}", outcome.manifest.display());
    Ok(())
}
