use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ovbound_cli::commands::{run, Command, Options};
use ovbound_cli::CliError;

#[derive(Parser)]
#[command(name = "ovbound", version, about = "Omitted-variable-bias bounds for debiased ML estimates")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Estimates, scenario bounds and robustness values into report.json.
    Analyze(Args),
    /// Bound surface over (eta_d2, eta_y2) into contour.csv and contour.svg.
    Contour(Args),
    /// Covariate benchmarks into benchmark.csv.
    Benchmark(Args),
    /// Coverage simulation into coverage.csv.
    Simulate(Args),
}

#[derive(clap::Args)]
struct Args {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Overrides the engine seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; defaults to one per core.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, args) = match cli.command {
        Cmd::Analyze(a) => (Command::Analyze, a),
        Cmd::Contour(a) => (Command::Contour, a),
        Cmd::Benchmark(a) => (Command::Benchmark, a),
        Cmd::Simulate(a) => (Command::Simulate, a),
    };
    let result = (|| {
        if let Some(n) = args.threads {
            if n == 0 {
                return Err(CliError::Config("--threads must be at least 1".into()));
            }
            rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global()
                .map_err(|e| CliError::Config(e.to_string()))?;
        }
        run(cmd, &Options { config: args.config, out: args.out, seed: args.seed })
    })();
    match result {
        Ok(files) => {
            for f in files {
                println!("{}", f.display());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprint!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
