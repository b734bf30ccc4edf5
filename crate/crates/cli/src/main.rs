use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kindiff::commands::{init_thread_pool, run_subcommand, RunOptions};
use kindiff::config::{parse_config, Mode};

#[derive(Parser)]
#[command(
    name = "kindiff",
    version,
    about = "Kinetic equations and their diffusion limit on heterogeneous media"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate the hypotheses of the diffusion limit for a configuration.
    Check(Args),
    /// Compute the diffusion matrix field and its bounds.
    Diffmat(Args),
    /// Run the kinetic solver for every ε in the config.
    Kinetic(Args),
    /// Run the limit diffusion problem.
    Diffusion(Args),
    /// ε-sweep of the kinetic solver against the diffusion limit.
    Converge(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    /// Omit wall-clock timings so reruns are byte-identical.
    #[arg(long)]
    deterministic: bool,
    /// Run even when the hypotheses of the limit theorem fail.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Text,
    Quiet,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (mode, args) = match cli.command {
        Command::Check(a) => (Mode::Check, a),
        Command::Diffmat(a) => (Mode::Diffmat, a),
        Command::Kinetic(a) => (Mode::Kinetic, a),
        Command::Diffusion(a) => (Mode::Diffusion, a),
        Command::Converge(a) => (Mode::Converge, a),
    };
    match run(mode, &args) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("kindiff: invariant check failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("kindiff: error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(mode: Mode, args: &Args) -> anyhow::Result<bool> {
    init_thread_pool()?;
    let cfg = parse_config(&args.config)?;
    let opts = RunOptions {
        deterministic: args.deterministic,
        force: args.force,
        out: args.out.clone(),
    };
    let outcome = run_subcommand(mode, &cfg, &opts)?;
    if let Format::Text = args.format {
        print!("{}", outcome.summary);
        for f in &outcome.files {
            println!("wrote {}", f.display());
        }
    }
    Ok(outcome.invariants_ok)
}
