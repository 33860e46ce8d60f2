use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lintrack_cli::{certify, compare_command, simulate_command, CliError, ConfigError, Experiment, Kind};

#[derive(Parser)]
#[command(name = "lintrack", version, about = "Linearization-based tracking MPC experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed loop and write its trajectory.
    Simulate(Common),
    /// Run all four controllers on the same setup.
    Compare(Common),
    /// Audit the standing assumptions over a state grid.
    Certify {
        #[command(flatten)]
        common: Common,
        /// Trajectory CSV to analyse for Lyapunov decrease.
        #[arg(long)]
        trajectory: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment file (TOML); builtin reactor defaults when omitted.
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    /// proposed-nstep, proposed-1step, lti or ltv
    #[arg(long)]
    controller: Option<String>,
    /// Trajectory CSV path.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Directory for SVG plots.
    #[arg(long)]
    plots: Option<PathBuf>,
    /// Comparison summary CSV path.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Certification report path.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<Experiment, CliError> {
        let mut exp = match &self.config {
            Some(p) => Experiment::from_path(p)?,
            None => Experiment::from_str("")?,
        };
        if let Some(k) = &self.controller {
            let kind = Kind::parse(k).ok_or_else(|| ConfigError::Invalid {
                key: "controller.kind".into(),
                message: format!("unknown controller `{k}`"),
            })?;
            let n = match exp.kind {
                Kind::ProposedNStep => exp.mpc.step_count,
                _ => exp.prediction.state_dim(),
            };
            exp = exp.with_kind(kind, n);
        }
        if let Some(s) = self.steps {
            exp.steps = s;
        }
        let out = &mut exp.output;
        for (slot, value) in [
            (&mut out.csv, &self.csv),
            (&mut out.plots, &self.plots),
            (&mut out.summary, &self.summary),
            (&mut out.report, &self.report),
        ] {
            if value.is_some() {
                *slot = value.clone();
            }
        }
        Ok(exp)
    }
}

fn run(cli: Cli) -> Result<i32, CliError> {
    match cli.command {
        Command::Simulate(common) => {
            let exp = common.load()?;
            let out = simulate_command(&exp)?;
            let log = &out.log;
            println!("controller: {}", log.controller);
            println!("steps: {}", log.rows.len().saturating_sub(1));
            println!("tracking_cost: {:.6}", log.tracking_cost());
            if let Some(e) = log.final_output_error() {
                println!("final_output_error: {e:.3e}");
            }
            if let Some(p) = &out.csv {
                println!("csv: {}", p.display());
            }
            if let Some(e) = &log.failure {
                eprintln!("error: {e}");
            }
            Ok(out.exit_code())
        }
        Command::Compare(common) => {
            let exp = common.load()?;
            let cmp = compare_command(&exp)?;
            print!("{}", cmp.table());
            Ok(0)
        }
        Command::Certify { common, trajectory } => {
            let mut exp = common.load()?;
            if trajectory.is_some() {
                exp.certify.trajectory = trajectory;
            }
            let out = certify(&exp)?;
            print!("{}", out.text.split("\n[points]").next().unwrap_or(""));
            if let Some(i) = out.text.find("\n[smoothness]") {
                print!("{}", &out.text[i..]);
            }
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
