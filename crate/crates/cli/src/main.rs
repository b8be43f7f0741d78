//! `forcefit` — calibrate interacting-agent models (car following, pedestrian
//! crowds, and their learned-force variants) against trajectory data, and
//! inspect what was learned.
//!
//! Exit codes: 0 success, 1 invalid input (arguments, config, data), 2
//! numerical failure (degenerate simulation, diverged iterate, failed
//! gradient check).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "forcefit",
    version,
    about = "Trajectory-based calibration of interacting-agent force models"
)]
struct Cli {
    /// Worker threads for batch evaluation (0 = one per core).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Directory the output files go to.
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct DataArgs {
    /// Parameter file (JSON) from a calibration run; falls back to the
    /// config's [init] params.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Keep only this lane of the traffic data (overrides the config).
    #[arg(long)]
    lane: Option<i64>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit model parameters to trajectory data.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Keep only this lane of the traffic data (overrides the config).
        #[arg(long)]
        lane: Option<i64>,
        /// Iterations between parameter snapshots (0 = a tenth of the run).
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Verify adjoint gradients against finite differences on a built-in
    /// battery of randomized instances of every model family.
    Gradcheck {
        /// Directory the report goes to.
        #[arg(long, default_value = ".")]
        out_dir: PathBuf,
        /// Randomized instances per family configuration.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        fd_step: f64,
        /// Largest acceptable relative error.
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        /// Seed for instance generation.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately mis-scale one adjoint component per instance; the
        /// check must fail, proving it can detect a wrong gradient.
        #[arg(long, hide = true)]
        corrupt_jacobian: bool,
    },
    /// Simulate the model over the extracted sequences and write its
    /// positions at the data nodes.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Report the mean tracking cost of fixed parameters on a dataset.
    Cost {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Generate synthetic trajectory data from known parameters.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Tabulate the calibrated interaction law on a grid (gap → speed for
    /// traffic, displacement → force for crowds).
    ForceGrid {
        #[command(flatten)]
        common: Common,
        /// Parameter file (JSON); falls back to the config's [init] params.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Grid points per axis.
        #[arg(long, default_value_t = 41)]
        samples: usize,
        /// Crowd displacement grid spans [-extent, extent] on both axes.
        #[arg(long, default_value_t = 2.0)]
        extent: f64,
        /// Traffic gaps span [0.5, max-gap].
        #[arg(long, default_value_t = 40.0)]
        max_gap: f64,
    },
    /// Evaluate the pair force for explicit two-agent scenarios.
    PairStudy {
        #[command(flatten)]
        common: Common,
        /// Parameter file (JSON); falls back to the config's [init] params.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Scenario CSV: xi_x,xi_y,vi_x,vi_y,xj_x,xj_y,vj_x,vj_y.
        #[arg(long)]
        scenarios: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            return ExitCode::from(code);
        }
    };
    if cli.threads > 0 {
        if let Err(err) = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build_global()
        {
            eprintln!("error: cannot size the thread pool: {err}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

/// 2 for numerical failures anywhere in the chain, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<forcefit::Error>() {
            if e.is_numerical() {
                return 2;
            }
        }
    }
    1
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Calibrate {
            common,
            seed,
            lane,
            checkpoint_every,
        } => commands::calibrate::run(commands::calibrate::Args {
            config: &common.config,
            out_dir: &common.out_dir,
            seed,
            lane,
            checkpoint_every,
        }),
        Command::Gradcheck {
            out_dir,
            instances,
            fd_step,
            tolerance,
            seed,
            corrupt_jacobian,
        } => commands::gradcheck::run(commands::gradcheck::Args {
            out_dir: &out_dir,
            instances,
            fd_step,
            tolerance,
            seed,
            corrupt_jacobian,
        }),
        Command::Simulate { common, data } => commands::eval::simulate_cmd(commands::eval::Args {
            config: &common.config,
            out_dir: &common.out_dir,
            params: data.params.as_deref(),
            lane: data.lane,
        }),
        Command::Cost { common, data } => commands::eval::cost_cmd(commands::eval::Args {
            config: &common.config,
            out_dir: &common.out_dir,
            params: data.params.as_deref(),
            lane: data.lane,
        }),
        Command::Synth { common, seed } => commands::synth::run(commands::synth::Args {
            config: &common.config,
            out_dir: &common.out_dir,
            seed,
        }),
        Command::ForceGrid {
            common,
            params,
            samples,
            extent,
            max_gap,
        } => commands::study::force_grid(commands::study::GridArgs {
            config: &common.config,
            out_dir: &common.out_dir,
            params: params.as_deref(),
            samples,
            extent,
            max_gap,
        }),
        Command::PairStudy {
            common,
            params,
            scenarios,
        } => commands::study::pair_study(commands::study::PairArgs {
            config: &common.config,
            out_dir: &common.out_dir,
            params: params.as_deref(),
            scenarios: &scenarios,
        }),
    }
}
