use clap::{Parser, Subcommand, ValueEnum};
use magcal_cli::commands::{cmd_calibrate, cmd_delta, cmd_simulate, cmd_study, default_out, parse_vector};
use magcal_cli::config::load_json;
use magcal_cli::{CliError, RunConfig};
use magcal_core::eval::{Estimator, StudySpec};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "magcal", version, about = "Factor-graph magnetometer calibration")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Method {
    Fg,
    FgFixed,
    Twostep,
    Tl,
}

impl From<Method> for Estimator {
    fn from(m: Method) -> Self {
        match m {
            Method::Fg => Estimator::Fg,
            Method::FgFixed => Estimator::FgFixed,
            Method::Twostep => Estimator::Twostep,
            Method::Tl => Estimator::Tl,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one run and write log.csv and truth.json.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Disable every noise source and hold the field constant.
        #[arg(long)]
        zero_noise: bool,
    },
    /// Calibrate a sensor log with one method.
    Calibrate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        log: PathBuf,
        #[arg(long, value_enum, default_value = "fg")]
        method: Method,
        /// Truth record from `simulate`, for error metrics.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Gyro columns hold rates in rad/s.
        #[arg(long)]
        gyro_rates: bool,
    },
    /// Run a Monte Carlo study and write study.csv and summary.json.
    Study {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare hard-iron estimates from a before and an after log.
    Delta {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Reference change `x,y,z` in nT.
        #[arg(long, allow_hyphen_values = true)]
        reference: Option<String>,
    },
}

fn run(cli: Cli) -> Result<serde_json::Value, CliError> {
    match cli.command {
        Command::Simulate {
            config,
            seed,
            out,
            zero_noise,
        } => {
            let mut cfg: RunConfig = load_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            cmd_simulate(cfg, &out.unwrap_or_else(default_out), zero_noise)
        }
        Command::Calibrate {
            config,
            log,
            method,
            truth,
            out,
            gyro_rates,
        } => {
            let mut cfg: RunConfig = load_json(config.as_deref())?;
            cfg.ingest.gyro_rates |= gyro_rates;
            cmd_calibrate(&cfg, &log, method.into(), truth.as_deref(), out.as_deref())
        }
        Command::Study {
            config,
            runs,
            seed,
            out,
        } => {
            let mut spec: StudySpec = load_json(config.as_deref())?;
            if let Some(r) = runs {
                spec.runs = r;
            }
            if let Some(s) = seed {
                spec.base_seed = s;
            }
            cmd_study(&spec, &out.unwrap_or_else(default_out))
        }
        Command::Delta {
            config,
            before,
            after,
            reference,
        } => {
            let cfg: RunConfig = load_json(config.as_deref())?;
            let reference = reference.as_deref().map(parse_vector).transpose()?;
            cmd_delta(&cfg, &before, &after, reference)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(doc) => {
            println!("{}", serde_json::to_string_pretty(&doc).expect("json value serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!(
                "{}",
                serde_json::to_string_pretty(&e.to_json()).expect("json value serializes")
            );
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
