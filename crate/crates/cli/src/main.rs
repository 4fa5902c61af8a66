//! `lppls`: generate synthetic data, calibrate LPPLS models, benchmark the
//! calibrators and run rolling critical-time forecasts.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lppls_core::calibration::Method;
use lppls_core::noise::NoiseKind;

mod commands;
mod config;
mod manifest;

use config::UsageError;

/// Environment variable capping the number of worker threads.
pub const WORKERS_ENV: &str = "LPPLS_WORKERS";

#[derive(Parser)]
#[command(
    name = "lppls",
    version,
    about = "Calibrate log-periodic power law singularity models"
)]
struct Cli {
    /// JSON config overlaid on the subcommand defaults (a run manifest also works)
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed; overrides every seed in the config
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Print the resolved config as JSON and exit
    #[arg(long, global = true)]
    print_config: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
pub struct SeriesArgs {
    /// CSV of `date,value` rows (ISO dates or integer indices)
    #[arg(long)]
    input: PathBuf,
    /// Window start (defaults to the first observation)
    #[arg(long)]
    t1: Option<String>,
    /// Analysis date; later rows are ignored (defaults to the last observation)
    #[arg(long)]
    t2: Option<String>,
    /// Take the natural log of every value
    #[arg(long)]
    log_values: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset
    Generate {
        #[arg(long)]
        kind: Option<NoiseKind>,
        #[arg(long)]
        count: Option<usize>,
        /// Points per series
        #[arg(long)]
        n: Option<usize>,
        /// Also write dataset.csv
        #[arg(long)]
        csv: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one series with multi-start Levenberg-Marquardt
    FitLm {
        #[command(flatten)]
        series: SeriesArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one series with a per-series network
    FitMlnn {
        #[command(flatten)]
        series: SeriesArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a P-LNN on a dataset (generated on the fly unless --train is given)
    TrainPlnn {
        #[arg(long)]
        kind: Option<NoiseKind>,
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Single-pass estimate from a trained P-LNN
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        series: SeriesArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Synthetic benchmark: error CDFs, dominance and timing
    Bench {
        /// Directory holding plnn_<kind>.bin models
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        scenarios: Option<usize>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long, value_delimiter = ',')]
        regimes: Option<Vec<NoiseKind>>,
        #[arg(long)]
        no_svg: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rolling-window critical-time forecast on a CSV series
    Forecast {
        #[arg(long)]
        input: PathBuf,
        /// Analysis date; nothing after it is used
        #[arg(long)]
        t2: String,
        #[arg(long)]
        windows: Option<usize>,
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<Method>>,
        #[arg(long)]
        log_values: bool,
        /// Shade a calendar interval on the plot, as `start,end`
        #[arg(long)]
        annotate: Vec<String>,
        #[arg(long)]
        no_svg: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_workers() -> anyhow::Result<()> {
    let Ok(v) = std::env::var(WORKERS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| config::usage(format!("{WORKERS_ENV} must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_workers()?;
    let ctx = commands::Context {
        config: cli.config,
        seed: cli.seed,
        print_config: cli.print_config,
    };
    match cli.command {
        Command::Generate {
            kind,
            count,
            n,
            csv,
            out,
        } => commands::generate(&ctx, kind, count, n, csv, &out),
        Command::FitLm { series, out } => commands::fit(&ctx, "fit-lm", &series, &out),
        Command::FitMlnn { series, out } => commands::fit(&ctx, "fit-mlnn", &series, &out),
        Command::TrainPlnn {
            kind,
            train,
            val,
            count,
            epochs,
            out,
        } => commands::train_plnn(&ctx, kind, train.as_deref(), val.as_deref(), count, epochs, &out),
        Command::Infer { model, series, out } => commands::infer(&ctx, &model, &series, &out),
        Command::Bench {
            models,
            scenarios,
            methods,
            regimes,
            no_svg,
            out,
        } => commands::bench(&ctx, models.as_deref(), scenarios, methods, regimes, !no_svg, &out),
        Command::Forecast {
            input,
            t2,
            windows,
            models,
            methods,
            log_values,
            annotate,
            no_svg,
            out,
        } => commands::forecast(
            &ctx,
            commands::ForecastArgs {
                input,
                t2,
                windows,
                models,
                methods,
                log_values,
                annotate,
                svg: !no_svg,
            },
            &out,
        ),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
