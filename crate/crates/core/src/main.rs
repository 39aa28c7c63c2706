use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use ks_lab::harness::{self, Overrides};

#[derive(Parser)]
#[command(name = "ks-lab", version, about = "Logistic Keller–Segel laboratory with rough initial data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// TOML run configuration
    config: PathBuf,
    /// Regularisation parameter(s); comma separated for sweeps
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    /// Grid resolution(s) in x; comma separated for sweeps
    #[arg(long, value_delimiter = ',')]
    nx: Vec<usize>,
    /// Worker threads (overrides KS_LAB_JOBS and the config)
    #[arg(long)]
    jobs: Option<usize>,
}

impl RunArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            eps: self.eps.clone(),
            nx: self.nx.clone(),
            jobs: self.jobs,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Integrate one configuration and check the a priori bounds
    Run(RunArgs),
    /// ε-sweep or resolution sweep
    Sweep(RunArgs),
    /// Build the weight Φ for the configured initial family
    Phi { config: PathBuf },
    /// Check hashes and recompute the bound report of a run directory
    Verify { dir: PathBuf },
    /// Tabulate the bound checks of run or sweep directories
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let outcome = match &cli.command {
        Command::Run(a) => harness::cmd_run(&a.config, &a.overrides()),
        Command::Sweep(a) => harness::cmd_sweep(&a.config, &a.overrides()),
        Command::Phi { config } => harness::cmd_phi(config),
        Command::Verify { dir } => harness::cmd_verify(dir),
        Command::Report { dirs } => harness::cmd_report(dirs),
    };
    ExitCode::from(outcome.code() as u8)
}
