use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use prte::dgp::DgpParams;
use prte::estimator::{estimate, EstimationConfig};
use prte::io::{emit_report, ingest_csv, render_report, OutputFormat, Report};
use prte::montecarlo::{run_replications, McConfig, McPolicy};
use prte::special::norm_quantile;
use prte::{Bandwidths, Policy, PrteError};

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Estimate,
    Simulate,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyKind {
    Pshift,
    Zshift,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

/// Cross-fitted PRTE estimation and Monte Carlo study.
#[derive(Debug, Parser)]
#[command(name = "prte", version)]
struct Cli {
    #[arg(long, value_enum, default_value = "estimate")]
    mode: Mode,
    /// Sample size per replication (simulate).
    #[arg(long, default_value_t = 500)]
    n: usize,
    /// Number of cross-fitting folds.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    /// Monte Carlo replications (simulate).
    #[arg(long, default_value_t = 1000)]
    reps: usize,
    /// Intensity of the shift P* = P + a(1 - P).
    #[arg(long, default_value_t = 0.5)]
    a: f64,
    /// Translation applied to every instrument (zshift).
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    z_shift: f64,
    #[arg(long, default_value_t = 20240601)]
    seed: u64,
    #[arg(long, default_value_t = 2.5)]
    h1: f64,
    #[arg(long, default_value_t = 0.25)]
    h2: f64,
    #[arg(long, default_value_t = 0.01)]
    delta: f64,
    #[arg(long, default_value_t = 0.25)]
    alpha: f64,
    /// Confidence level of the interval.
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long, value_enum, default_value = "pshift")]
    policy: PolicyKind,
    /// CSV sample with columns y, s, x1..xK, z1..zM (estimate).
    #[arg(long)]
    input: Option<PathBuf>,
    /// Report destination; stdout when omitted.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "json")]
    format: Format,
    /// Worker threads; defaults to RAYON_NUM_THREADS or the core count.
    #[arg(long)]
    threads: Option<usize>,
}

fn run(cli: &Cli) -> Result<(), PrteError> {
    let bw = Bandwidths {
        h1: cli.h1,
        h2: cli.h2,
        delta: cli.delta,
        alpha: cli.alpha,
    };
    bw.validate()?;
    if !(cli.level > 0.0 && cli.level < 1.0) {
        return Err(PrteError::Config(format!("confidence level must lie in (0, 1), got {}", cli.level)));
    }
    let z_quantile = norm_quantile(0.5 + cli.level / 2.0);
    let format = match cli.format {
        Format::Csv => OutputFormat::Csv,
        Format::Json => OutputFormat::Json,
    };
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(PrteError::Config("--threads must be positive".into()));
        }
        // Fails only if a global pool already exists, which cannot happen here.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    let emit = |report: Report<'_>| -> Result<(), PrteError> {
        match &cli.output {
            Some(path) => emit_report(report, format, path),
            None => {
                print!("{}", render_report(report, format)?);
                Ok(())
            }
        }
    };

    match cli.mode {
        Mode::Estimate => {
            let input = cli
                .input
                .as_ref()
                .ok_or_else(|| PrteError::Config("--input is required in estimate mode".into()))?;
            let data = ingest_csv(input)?;
            let policy = match cli.policy {
                PolicyKind::Pshift => Policy::proportional(cli.a)?,
                PolicyKind::Zshift => Policy::z_translation(cli.z_shift),
            };
            let config = EstimationConfig {
                folds: cli.folds,
                bw,
                seed: cli.seed,
                z_quantile,
                ..EstimationConfig::new(policy)
            };
            let result = estimate(&data, &config)?;
            emit(Report::Estimate(&result))
        }
        Mode::Simulate => {
            let policy = match cli.policy {
                PolicyKind::Pshift => McPolicy::Proportional { a: cli.a },
                PolicyKind::Zshift => McPolicy::ZTranslation { c: cli.z_shift },
            };
            let config = McConfig {
                n: cli.n,
                folds: cli.folds,
                replications: cli.reps,
                policy,
                seed: cli.seed,
                bw,
                z_quantile,
                params: DgpParams::default(),
                threads: None,
            };
            match run_replications(&config) {
                Ok(report) => emit(Report::MonteCarlo(&report)),
                Err(PrteError::TooManyFailures {
                    failures,
                    replications,
                    report,
                }) => {
                    emit(Report::MonteCarlo(&report))?;
                    Err(PrteError::TooManyFailures {
                        failures,
                        replications,
                        report,
                    })
                }
                Err(e) => Err(e),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
