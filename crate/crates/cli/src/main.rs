use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use smp_cli::commands::{cmd_bench, cmd_mp_check, cmd_solve, cmd_spike, version_string};
use smp_cli::config::{Overrides, ProblemName, RunConfig};
use smp_cli::CliResult;

#[derive(Parser)]
#[command(name = "smp", version, about = "Maximum-principle experiments for fully coupled FBSDE control problems")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Solve the coupled FBSDE and both adjoints; write a summary.
    Solve(Common),
    /// Run the spike ladder and fit orders in eps.
    Spike(Common),
    /// Check the maximum principle along the candidate control.
    MpCheck(Common),
    /// Run the acceptance suite at the configured scale.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run config; without it the LQ benchmark with defaults is used.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated spike widths.
    #[arg(long, value_delimiter = ',')]
    epsilon_ladder: Option<Vec<f64>>,
    /// Comma-separated moment exponents.
    #[arg(long, value_delimiter = ',')]
    beta: Option<Vec<f64>>,
    /// Start of the spike window.
    #[arg(long)]
    spike_at: Option<f64>,
    /// Write solution and adjoint panels as CSV (solve).
    #[arg(long)]
    dump_panels: bool,
    /// Write every evaluated Hamiltonian gap as CSV (mp-check).
    #[arg(long)]
    dump_hamiltonian: bool,
}

impl Common {
    fn config(&self) -> CliResult<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::new(ProblemName::Lq),
        };
        let o = Overrides {
            seed: self.seed,
            out: self.out.clone(),
            paths: self.paths,
            steps: self.steps,
            ladder: self.epsilon_ladder.clone(),
            betas: self.beta.clone(),
            spike_at: self.spike_at,
        };
        base.apply(&o).resolve()
    }
}

fn run(cli: Cli) -> CliResult<i32> {
    let outcome = match &cli.command {
        Cmd::Solve(c) => cmd_solve(&c.config()?, c.dump_panels)?,
        Cmd::Spike(c) => cmd_spike(&c.config()?)?,
        Cmd::MpCheck(c) => cmd_mp_check(&c.config()?, c.dump_hamiltonian)?,
        Cmd::Bench(c) => {
            let exe = std::env::current_exe().ok();
            cmd_bench(&c.config()?, exe.as_deref())?
        }
    };
    Ok(outcome.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("smp: {e} [{}]", version_string());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
