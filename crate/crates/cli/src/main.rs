//! `pipereuse`: sample, merge, cache-simulate and solve pipeline workloads.

mod commands;
mod workload;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use workload::SpaceArgs;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }
}

impl From<pipereuse::Error> for CliError {
    fn from(e: pipereuse::Error) -> Self {
        let code = match e {
            pipereuse::Error::Contract(_) => 3,
            _ => 2,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::config(e.to_string())
    }
}

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(
    name = "pipereuse",
    version,
    about = "Reuse-aware pipeline tuning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// toy, sh-example, disjoint, root-heavy, two-point, tree:k=..,d=..,preset=..,
    /// profile:PATH or space:NAME.
    #[arg(long)]
    pub workload: Option<String>,
    #[command(flatten)]
    pub space: SpaceArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output file; stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Worker threads for sweep points and trials.
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// Comma-separated lru, reciprocal, wreciprocal, opt.
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "lru,reciprocal,wreciprocal,opt"
    )]
    pub policies: Vec<String>,
    /// Capacities: numbers, `N%` of the total output size, `all`, or
    /// `geom:LO:HI:COUNT`.
    #[arg(long, value_delimiter = ',', required = true)]
    pub capacities: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Seconds allowed to the exact solver per capacity.
    #[arg(long, default_value_t = 60.0)]
    pub time_limit: f64,
    /// Run the exact solver beyond the size guardrail.
    #[arg(long)]
    pub force_opt: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Merge the workload and report reuse statistics.
    MergeReport {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Simulate cache policies over a capacity sweep.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        /// JSONL trace of the first trial; needs one policy and one capacity.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run Successive Halving and simulate caching over its generations.
    Sh {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        /// n,R,eta,G
        #[arg(long, value_delimiter = ',', required = true)]
        sh: Vec<String>,
        #[arg(long, value_enum, default_value = "warm-start")]
        mode: commands::Mode,
        /// Directory receiving one profile JSON per generation.
        #[arg(long)]
        dump_dir: Option<PathBuf>,
    },
    /// Compute optimal cache schedules.
    Opt {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_delimiter = ',', required = true)]
        capacities: Vec<String>,
        #[arg(long, default_value_t = 60.0)]
        time_limit: f64,
        #[arg(long)]
        force_opt: bool,
        /// Write the MILP model in LP format; needs exactly one capacity.
        #[arg(long)]
        milp: Option<PathBuf>,
    },
    /// Sample pipelines from a search space.
    Sample {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Generate a k-ary tree workload as a profile.
    GenTree {
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        d: usize,
        /// uniform, root-heavy or two-point.
        #[arg(long, default_value = "uniform")]
        preset: String,
        #[arg(long)]
        cost: Option<f64>,
        #[arg(long)]
        size: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::MergeReport { common } => commands::merge_report(&common),
        Command::Simulate {
            common,
            sweep,
            trace,
        } => commands::simulate(&common, &sweep, trace.as_deref()),
        Command::Sh {
            common,
            sweep,
            sh,
            mode,
            dump_dir,
        } => commands::sh(&common, &sweep, &sh, mode, dump_dir.as_deref()),
        Command::Opt {
            common,
            capacities,
            time_limit,
            force_opt,
            milp,
        } => commands::opt(&common, &capacities, time_limit, force_opt, milp.as_deref()),
        Command::Sample { common } => commands::sample(&common),
        Command::GenTree {
            k,
            d,
            preset,
            cost,
            size,
            seed,
            out,
        } => {
            let mut body = format!("k={k},d={d},preset={preset},seed={seed}");
            if let Some(c) = cost {
                body.push_str(&format!(",cost={c}"));
            }
            if let Some(s) = size {
                body.push_str(&format!(",size={s}"));
            }
            commands::gen_tree(&body, out.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(
            CliError::from(pipereuse::Error::Contract("x".into())).code,
            3
        );
        assert_eq!(CliError::from(pipereuse::Error::Config("x".into())).code, 2);
        assert_eq!(CliError::from(pipereuse::Error::UndefinedRatio).code, 2);
    }

    #[test]
    fn clap_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
