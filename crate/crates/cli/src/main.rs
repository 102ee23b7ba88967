//! `branchdev`: validate two-type branching models with immigration, compute
//! exact laws, simulate, and run the deviation-rate battery.
//!
//! # Model files
//!
//! TOML with three laws, each a list of atoms `{ j = [j1, j2], p = weight }`:
//!
//! ```toml
//! [offspring.type1]
//! atoms = [{ j = [1, 0], p = 0.5 }, { j = [2, 1], p = 0.5 }]
//!
//! [offspring.type2]
//! atoms = [{ j = [0, 2], p = 1.0 }]
//!
//! [immigration]
//! atoms = [{ j = [0, 0], p = 0.5 }, { j = [1, 1], p = 0.5 }]
//! ```
//!
//! Weights must be positive and sum to one within `1e-9`; atoms may not repeat.
//! Unknown keys are rejected.
//!
//! # Exit status
//!
//! 0 on success, including models whose hypotheses fail; 2 on malformed input
//! (unreadable or invalid model file, bad flag values); 1 on a numerical or
//! resource failure during a run.

mod args;
mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use branchdev_core::devlab::EpsSet;

#[derive(Parser)]
#[command(name = "branchdev", version, about = "Deviation rates of two-type branching processes with immigration")]
struct Cli {
    /// Worker threads for Monte Carlo work; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

/// Flags every command shares.
#[derive(Args, Debug)]
pub struct RunConfig {
    /// Model file (TOML).
    #[arg(long)]
    pub model: PathBuf,

    /// Output directory. Commands that emit a single JSON document print it to
    /// stdout when this is absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Check every hypothesis flag and print the report.
    Validate {
        #[command(flatten)]
        run: RunConfig,
        /// Exponent d in the geometric-regime condition h0 * gamma * rho^d > 1.
        #[arg(long, default_value_t = 1)]
        geometric_d: u32,
    },
    /// Perron data of M, the A^n / gamma^n limit and mean-ratio convergence.
    Spectral {
        #[command(flatten)]
        run: RunConfig,
        /// Largest generation for the mean-ratio supremum.
        #[arg(long, default_value_t = 20)]
        n_max: usize,
    },
    /// Exact laws, deviation probabilities and limit sums from truncated generating functions.
    Exact {
        #[command(flatten)]
        run: RunConfig,
        #[arg(long, default_value_t = 6)]
        n_max: usize,
        /// Truncation box [0, D]^2 for every series.
        #[arg(long, default_value_t = branchdev_core::series::DEFAULT_DEGREE)]
        degree_cap: usize,
        #[arg(long, value_parser = args::parse_eps, default_value = "0.5")]
        eps: EpsSet,
        #[arg(long, value_parser = args::parse_pair, allow_hyphen_values = true, default_value = "1,-1")]
        l: [f64; 2],
        /// Burn-in generation for the ratio limit sum.
        #[arg(long, default_value_t = 1)]
        k0: usize,
    },
    /// One trajectory with its immigrant split, plus Monte Carlo event curves.
    Simulate {
        #[command(flatten)]
        run: RunConfig,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 7)]
        n_max: usize,
        #[arg(long, default_value_t = 10_000)]
        reps: u64,
        #[arg(long, value_parser = args::parse_eps, default_value = "next:0.5,ratio:0.25,tail:0.01")]
        eps: EpsSet,
        #[arg(long, value_parser = args::parse_pair, allow_hyphen_values = true, default_value = "1,-1")]
        l: [f64; 2],
        /// Comma-separated statistics to estimate.
        #[arg(long, value_parser = args::parse_statistics, default_value = "dev-next,dev-ratio,y-tail")]
        statistic: args::Statistics,
        /// Quantile of Y at the reference generation used as the conditioning threshold.
        #[arg(long, value_parser = args::parse_quantile, default_value = "0.7")]
        alpha_quantile: f64,
        /// Type of the single starting particle.
        #[arg(long, value_parser = args::parse_start_type, default_value = "1")]
        start_type: usize,
    },
    /// Run the full battery and report a verdict per theorem and statistic.
    Verdicts {
        #[command(flatten)]
        run: RunConfig,
        #[arg(long)]
        seed: u64,
        /// Upper end of the Monte Carlo fit windows.
        #[arg(long, default_value_t = 7)]
        n_max: usize,
        #[arg(long, default_value_t = 100_000)]
        reps: u64,
        /// Replicas per generation for the exponential-moment estimates.
        #[arg(long, default_value_t = 100_000)]
        mgf_reps: u64,
        #[arg(long, value_parser = args::parse_eps, default_value = "next:0.5,ratio:0.25,tail:0.01")]
        eps: EpsSet,
        #[arg(long, value_parser = args::parse_pair, allow_hyphen_values = true, default_value = "1,-1")]
        l: [f64; 2],
        #[arg(long, default_value_t = branchdev_core::series::DEFAULT_DEGREE)]
        degree_cap: usize,
        #[arg(long, value_parser = args::parse_quantile, default_value = "0.7")]
        alpha_quantile: f64,
        #[arg(long, default_value_t = 0.5)]
        beta: f64,
        #[arg(long, default_value_t = 1)]
        geometric_d: u32,
        #[arg(long, value_parser = args::parse_start_type, default_value = "1")]
        start_type: usize,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| commands::InputError(format!("cannot size the worker pool: {e}")))?;
    }
    match cli.command {
        Command::Validate { run, geometric_d } => commands::validate(&run, geometric_d),
        Command::Spectral { run, n_max } => commands::spectral(&run, n_max),
        Command::Exact {
            run,
            n_max,
            degree_cap,
            eps,
            l,
            k0,
        } => commands::exact(&run, n_max, degree_cap, eps, l, k0),
        Command::Simulate {
            run,
            seed,
            n_max,
            reps,
            eps,
            l,
            statistic,
            alpha_quantile,
            start_type,
        } => commands::simulate(
            &run,
            &commands::SimulateOptions {
                seed,
                n_max,
                reps,
                eps,
                l,
                statistics: statistic.0,
                alpha_quantile,
                start_type,
            },
        ),
        Command::Verdicts {
            run,
            seed,
            n_max,
            reps,
            mgf_reps,
            eps,
            l,
            degree_cap,
            alpha_quantile,
            beta,
            geometric_d,
            start_type,
        } => {
            let defaults = branchdev_core::devlab::BatteryConfig::default();
            let window = |from: usize| (from..=n_max.max(from)).collect::<Vec<_>>();
            let config = branchdev_core::devlab::BatteryConfig {
                start_type,
                eps,
                l,
                degree: degree_cap,
                reps,
                mgf_reps,
                seed,
                geometric_d,
                alpha_quantile,
                beta,
                geometric_ns: window(defaults.geometric_ns[0]),
                supergeometric_ns: window(defaults.supergeometric_ns[0]),
                tail_ns: window(defaults.tail_ns[0]),
                ..defaults
            };
            commands::verdicts(&run, &config)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if commands::is_input_error(&e) { 2 } else { 1 })
        }
    }
}
