use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use fprom_core::analytic::Family;
use fprom_core::grid::Grid;
use fprom_core::langevin_sim::simulate_with_stats;
use fprom_core::pipeline::{
    self, default_output_dir, CalibrationMethod, PredictOptions, RomArtifact, RunConfig, SimulateConfig, ARTIFACT_FILE,
    METRICS_FILE,
};
use fprom_core::{Error, Result};

/// Fokker-Planck reduced-order models calibrated from ensemble time series.
///
/// Exit codes: 0 success, 2 input error, 3 numerical divergence, 4 infeasible configuration.
/// Outputs go to `--out`, else the config's `output_dir`, else $FPROM_OUT_DIR, else ./fprom-out.
#[derive(Parser)]
#[command(name = "fprom", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a Langevin ensemble as `traj_id,t,x` CSV.
    Simulate {
        /// TOML file with `[sde]` and `[plan]` tables.
        #[arg(long)]
        config: PathBuf,
        /// Overrides the plan's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Kramers-Moyal estimates and moment regression over the training window.
    Estimate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 20)]
        bins: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a reduced-order model artifact from a run config.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    /// `train` with loss minimization.
    Calibrate {
        #[command(flatten)]
        run: RunArgs,
    },
    /// Propagate an artifact's density to later times.
    Predict {
        #[arg(long)]
        artifact: PathBuf,
        /// Comma-separated record times, original units.
        #[arg(long, value_delimiter = ',', required_unless_present = "horizon")]
        times: Vec<f64>,
        /// Last record time; with `--every`, records a uniform series up to it.
        #[arg(long, requires = "every")]
        horizon: Option<f64>,
        #[arg(long)]
        every: Option<f64>,
        #[arg(long)]
        allow_negative_diffusion: bool,
        #[arg(long, default_value_t = 100_000)]
        reconstruction_samples: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare predictions against the testing part of the configured dataset.
    Validate {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        allow_negative_diffusion: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write closed-form Gaussian densities.
    Oracle {
        #[arg(long, value_enum)]
        family: FamilyArg,
        #[arg(long, default_value_t = 0.0)]
        drift: f64,
        #[arg(long, default_value_t = 0.5)]
        diffusion: f64,
        /// Standard deviation of the pure-drift family.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long, value_delimiter = ',', required = true)]
        times: Vec<f64>,
        /// `x_min,x_max,n_points`.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
        grid: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyArg {
    /// Pure diffusion.
    F1,
    /// Pure drift.
    F2,
    /// Constant drift and diffusion.
    F3,
}

fn load_run(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir());
    Ok((cfg, out))
}

fn train(args: &RunArgs, force_loss: bool) -> Result<()> {
    let (mut cfg, out) = load_run(args)?;
    if force_loss {
        cfg.calibration.method = CalibrationMethod::LossMinimization;
        cfg.validate()?;
    }
    let result = pipeline::run_train(&cfg, &out)?;
    print!("{}", result.report.lines().take_while(|l| !l.starts_with("config.")).map(|l| format!("{l}\n")).collect::<String>());
    println!("artifact={}", out.join(ARTIFACT_FILE).display());
    Ok(())
}

fn parse_grid(parts: &[String]) -> Result<Grid<f64>> {
    let bad = || Error::InvalidArgument("--grid expects x_min,x_max,n_points".into());
    let [a, b, n] = parts else { return Err(bad()) };
    Grid::new(a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?, n.parse().map_err(|_| bad())?)
}

fn uniform_times(start: f64, horizon: f64, every: f64) -> Result<Vec<f64>> {
    if !(every > 0.0) || !(horizon > start) {
        return Err(Error::InvalidArgument("--every must be positive and --horizon must follow the initial time".into()));
    }
    let n = ((horizon - start) / every * (1.0 - 1e-12)).ceil() as usize;
    let mut times: Vec<f64> = (1..n).map(|k| start + k as f64 * every).collect();
    times.push(horizon);
    Ok(times)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, seed, out } => {
            let mut cfg = SimulateConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.plan.seed = s;
            }
            let (ens, stats) = simulate_with_stats(&cfg.sde, &cfg.plan)?;
            if !stats.is_sane() {
                log::warn!("increment statistics look off: {stats:?}");
            }
            let path = out.unwrap_or_else(|| default_output_dir().join("ensemble.csv"));
            pipeline::write_ensemble_csv(&ens, &path)?;
            println!("trajectories={} times={} path={}", ens.n_realizations(), ens.n_times(), path.display());
        }
        Command::Estimate { config, bins, out } => {
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir());
            let report = pipeline::estimate(&cfg, bins)?;
            let path = out.join("km.csv");
            std::fs::create_dir_all(&out).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            std::fs::write(&path, report.km_csv()).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            for (i, c) in report.regression.drift_coefficients().iter().enumerate() {
                println!("drift_{i}={c}");
            }
            for (i, c) in report.regression.diffusion_coefficients().iter().enumerate() {
                println!("diffusion_{i}={c}");
            }
            println!("km={}", path.display());
        }
        Command::Train { run } => train(&run, false)?,
        Command::Calibrate { run } => train(&run, true)?,
        Command::Predict { artifact, times, horizon, every, allow_negative_diffusion, reconstruction_samples, out } => {
            let a = RomArtifact::load(&artifact)?;
            let times = match (horizon, every) {
                (Some(h), Some(e)) => uniform_times(a.transform.inverse_t(a.initial_time)?, h, e)?,
                _ => times,
            };
            let out = out.unwrap_or_else(|| default_output_dir().join("predict"));
            let options = PredictOptions { allow_negative_diffusion, reconstruction_samples };
            let p = pipeline::run_predict(&a, &times, options, &out)?;
            println!(
                "densities={} reconstructed={} dir={}",
                p.densities.len(),
                p.reconstructed.as_ref().map_or(0, Vec::len),
                out.display()
            );
        }
        Command::Validate { artifact, config, allow_negative_diffusion, out } => {
            let a = RomArtifact::load(&artifact)?;
            let cfg = RunConfig::load(&config)?;
            let out = out.unwrap_or_else(|| cfg.output_dir());
            let report = pipeline::run_validate(&a, &cfg, allow_negative_diffusion, &out)?;
            let f = report.final_row();
            println!("final_time={} kl={} l1={}", f.time, f.kl, f.l1);
            println!("metrics={}", out.join(METRICS_FILE).display());
        }
        Command::Oracle { family, drift, diffusion, sigma, times, grid, out } => {
            let grid = parse_grid(&grid)?;
            let family = match family {
                FamilyArg::F1 => Family::F1 { diffusion },
                FamilyArg::F2 => Family::F2 { drift, sigma },
                FamilyArg::F3 => Family::F3 { drift, diffusion },
            };
            let out = out.unwrap_or_else(|| default_output_dir().join("oracle"));
            let manifest = pipeline::write_oracle(family, &grid, &times, &out)?;
            println!("manifest={}", manifest.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            info!("{e:?}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

