mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::error::{CliError, EXIT_CONFIG};

#[derive(Parser, Debug)]
#[command(name = "cpfactor", version, about = "Factor models for multivariate event sequences")]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

/// Model description files shared by most commands.
#[derive(Args, Debug, Clone, serde::Serialize)]
pub struct ModelFiles {
    /// Event catalog (one label per line, `!terminating` marks the last event).
    #[arg(long)]
    pub catalog: PathBuf,
    /// Covariate specification.
    #[arg(long)]
    pub spec: PathBuf,
}

/// Stochastic EM settings.
#[derive(Args, Debug, Clone, serde::Serialize)]
pub struct EmArgs {
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    #[arg(long, default_value_t = 300)]
    pub burn_in: usize,
    #[arg(long, default_value_t = 200)]
    pub window: usize,
    #[arg(long, default_value_t = 0.9)]
    pub zero_snap: f64,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the built-in fifteen-type simulation design.
    Design {
        #[arg(long)]
        out: PathBuf,
        /// Terminating event at risk only right after `Next`.
        #[arg(long)]
        gate_terminal: bool,
    },
    /// Simulate a dataset from true parameters.
    Simulate {
        #[command(flatten)]
        model: ModelFiles,
        #[arg(long)]
        truth: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Exponential censoring rate; omitted means no censoring.
        #[arg(long)]
        censor_rate: Option<f64>,
        #[arg(long, default_value_t = cpfactor::simulator::DEFAULT_MAX_EVENTS)]
        max_events: usize,
        #[arg(long, default_value_t = cpfactor::simulator::DEFAULT_HORIZON)]
        horizon: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit at one penalty pair.
    Fit {
        #[command(flatten)]
        model: ModelFiles,
        #[arg(long)]
        mask: PathBuf,
        /// Directory holding `events.log`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        gamma1: f64,
        #[arg(long, default_value_t = 0.0)]
        gamma2: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        em: EmArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Grid search over penalty pairs with BIC.
    Select {
        #[command(flatten)]
        model: ModelFiles,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `lo,hi` range of ln(gamma1).
        #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
        log_gamma1: (f64, f64),
        #[arg(long)]
        count1: usize,
        #[arg(long, value_parser = parse_range, allow_hyphen_values = true)]
        log_gamma2: (f64, f64),
        #[arg(long)]
        count2: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        em: EmArgs,
        /// Quadrature nodes per factor dimension.
        #[arg(long, default_value_t = 15)]
        nodes: usize,
        #[arg(long)]
        warm_start: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Standard errors at fitted parameters.
    Se {
        #[command(flatten)]
        model: ModelFiles,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        draws: usize,
        #[arg(long, default_value_t = 5)]
        thin: usize,
        #[arg(long, default_value_t = 500)]
        warmup: usize,
        /// Include coefficients estimated at zero.
        #[arg(long)]
        all_free: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Selection and estimation metrics over replicate directories.
    Eval {
        #[command(flatten)]
        model: ModelFiles,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Replicate directories, each produced by `select` and `se`.
        #[arg(long, num_args = 1.., required = true)]
        replications: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_range(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected `lo,hi`, got `{s}`"))?;
    let lo = a.trim().parse::<f64>().map_err(|e| e.to_string())?;
    let hi = b.trim().parse::<f64>().map_err(|e| e.to_string())?;
    Ok((lo, hi))
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::config("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| CliError::config(e.to_string()))?;
    }
    match cli.command {
        Command::Design { out, gate_terminal } => commands::design(&out, gate_terminal),
        Command::Simulate { model, truth, n, seed, censor_rate, max_events, horizon, out } => {
            commands::simulate(&model, &truth, n, seed, censor_rate, max_events, horizon, &out)
        }
        Command::Fit { model, mask, data, gamma1, gamma2, seed, em, out } => {
            commands::fit(&model, &mask, &data, gamma1, gamma2, seed, &em, &out)
        }
        Command::Select { model, mask, data, log_gamma1, count1, log_gamma2, count2, seed, em, nodes, warm_start, out } => {
            let grid = cpfactor::select::GridSpec { log_gamma1, count1, log_gamma2, count2 };
            commands::select(&model, &mask, &data, grid, seed, &em, nodes, warm_start, &out)
        }
        Command::Se { model, mask, data, params, seed, draws, thin, warmup, all_free, out } => {
            let cfg = cpfactor::inference::InferenceConfig { draws, thin, warmup, seed, ..Default::default() };
            commands::se(&model, &mask, &data, &params, &cfg, all_free, &out)
        }
        Command::Eval { model, mask, truth, replications, out } => {
            commands::eval(&model, &mask, &truth, &replications, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG as u8) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}
