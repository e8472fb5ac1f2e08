//! Run configuration, dataset ingest, train/test split, artifacts and reports.
//!
//! All times and positions inside a [`RomArtifact`] are in model coordinates,
//! i.e. after the configured transform. Times in config files, CSV outputs and
//! reports are in original units.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::analytic::Family;
use crate::calibrate::{calibrate, CalibrationProblem, Distance, Optimizer, Status, PENALTY};
use crate::coefficients::CoefficientModel;
use crate::density::{
    kl_divergence, l1_distance, l2_distance_sq, kde_estimate, tikhonov_smooth, Bandwidth, DensityField,
    DEFAULT_LAMBDA, NORMALIZED_MASS_TOL,
};
use crate::error::{Error, Result};
use crate::fpe_solver::{solve_segmented, Boundary, FpeOperator, Integrator, SolutionTrace, SolverConfig};
use crate::grid::{Grid, GridSpec};
use crate::km_estimate::{
    bin_averaged, conditional_km_coefficient, moment_series, regress_time_only_coefficients, MomentSeries,
    TrajectoryEnsemble,
};
use crate::langevin_sim::{SdeSpec, SimPlan};
use crate::sampling::{pullback_density, rejection_sample, TransformKind};

/// Overrides the default output directory when the config does not set one.
pub const OUT_DIR_ENV: &str = "FPROM_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "fprom-out";
pub const ARTIFACT_FORMAT: u32 = 1;
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const ARTIFACT_FILE: &str = "artifact.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.csv";

// ---------------------------------------------------------------- config

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    /// Long-format `traj_id,t,x` CSV.
    Ensemble,
    /// Manifest of `time,path` lines pointing at `x,f` CSVs.
    Densities,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub mode: InputMode,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationMethod {
    #[default]
    MomentRegression,
    LossMinimization,
}

impl CalibrationMethod {
    pub fn name(self) -> &'static str {
        match self {
            CalibrationMethod::MomentRegression => "moment_regression",
            CalibrationMethod::LossMinimization => "loss_minimization",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerChoice {
    #[default]
    NelderMead,
    RandomMultistartNelderMead,
}

fn default_budget() -> usize {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationConfig {
    #[serde(default)]
    pub method: CalibrationMethod,
    #[serde(default)]
    pub drift_degree: usize,
    #[serde(default)]
    pub diffusion_degree: usize,
    #[serde(default)]
    pub optimizer: OptimizerChoice,
    #[serde(default = "default_budget")]
    pub budget: usize,
    /// One `[lower, upper]` pair per coefficient, drift first. Required for loss minimization.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<Vec<[f64; 2]>>,
    #[serde(default)]
    pub distance: Distance,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            method: CalibrationMethod::default(),
            drift_degree: 0,
            diffusion_degree: 0,
            optimizer: OptimizerChoice::default(),
            budget: default_budget(),
            bounds: None,
            distance: Distance::default(),
        }
    }
}

fn default_dt() -> f64 {
    0.01
}

fn default_accuracy() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSettings {
    #[serde(default)]
    pub integrator: Integrator,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default)]
    pub boundary: Boundary,
    #[serde(default = "default_accuracy")]
    pub accuracy_order: usize,
    #[serde(default)]
    pub allow_negative_diffusion: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            integrator: Integrator::default(),
            dt: default_dt(),
            boundary: Boundary::default(),
            accuracy_order: default_accuracy(),
            allow_negative_diffusion: false,
        }
    }
}

impl SolverSettings {
    pub fn config(&self, record_times: Vec<f64>) -> SolverConfig<f64> {
        SolverConfig {
            integrator: self.integrator,
            dt: self.dt,
            record_times,
            boundary: self.boundary,
            accuracy_order: self.accuracy_order,
            allow_negative_diffusion: self.allow_negative_diffusion,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitConfig {
    /// Last training time, original units.
    pub train_end: f64,
    /// First training time, original units; defaults to the first sampled time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truncate_start: Option<f64>,
}

fn default_lambda() -> f64 {
    DEFAULT_LAMBDA
}

fn default_smoothing_derivative() -> usize {
    2
}

fn default_reconstruction_samples() -> usize {
    100_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub input: InputConfig,
    /// Model-coordinate grid.
    pub grid: GridSpec,
    #[serde(default)]
    pub transform: TransformKind,
    pub split: SplitConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default = "default_lambda")]
    pub smoothing_lambda: f64,
    #[serde(default = "default_smoothing_derivative")]
    pub smoothing_derivative: usize,
    /// Fixed KDE bandwidth; normal reference rule when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    /// Samples per density for log-transform resampling.
    #[serde(default = "default_reconstruction_samples")]
    pub reconstruction_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl RunConfig {
    /// Reads a TOML config; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, path, base)
    }

    /// `origin` only labels parse errors.
    pub fn from_toml(text: &str, origin: &Path, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = parse_toml(text, origin)?;
        if cfg.input.path.is_relative() {
            cfg.input.path = base.join(&cfg.input.path);
        }
        if let Some(out) = &cfg.output_dir {
            if out.is_relative() {
                cfg.output_dir = Some(base.join(out));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.build::<f64>()?;
        if let Some(start) = self.split.truncate_start {
            if !(start < self.split.train_end) {
                return Err(Error::Config(format!(
                    "truncate_start {start} must precede train_end {}",
                    self.split.train_end
                )));
            }
        }
        if !(self.smoothing_lambda > 0.0) || !self.smoothing_lambda.is_finite() {
            return Err(Error::Config("smoothing_lambda must be positive".into()));
        }
        if !(self.solver.dt > 0.0) || !self.solver.dt.is_finite() {
            return Err(Error::Config("solver.dt must be positive".into()));
        }
        if self.solver.accuracy_order == 0 || !self.solver.accuracy_order.is_multiple_of(2) {
            return Err(Error::Config("solver.accuracy_order must be a positive even integer".into()));
        }
        if let Some(h) = self.bandwidth {
            if !(h > 0.0) || !h.is_finite() {
                return Err(Error::Config("bandwidth must be positive".into()));
            }
        }
        if self.reconstruction_samples == 0 {
            return Err(Error::Config("reconstruction_samples must be positive".into()));
        }
        let cal = &self.calibration;
        if cal.method == CalibrationMethod::LossMinimization {
            let n = cal.drift_degree + cal.diffusion_degree + 2;
            match &cal.bounds {
                None => return Err(Error::Config("loss_minimization requires calibration.bounds".into())),
                Some(b) if b.len() != n => {
                    return Err(Error::Config(format!("calibration.bounds needs {n} pairs, got {}", b.len())))
                }
                Some(_) => {}
            }
            if cal.budget < crate::calibrate::MIN_BUDGET {
                return Err(Error::Config(format!("calibration.budget must be at least {}", crate::calibrate::MIN_BUDGET)));
            }
        }
        Ok(())
    }

    /// Config value, then `FPROM_OUT_DIR`, then `fprom-out`.
    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(default_output_dir)
    }

    fn bandwidth(&self) -> Bandwidth<f64> {
        self.bandwidth.map_or(Bandwidth::Auto, Bandwidth::Fixed)
    }

    fn model_grid(&self) -> Result<Grid<f64>> {
        self.grid.build()
    }
}

pub fn default_output_dir() -> PathBuf {
    std::env::var_os(OUT_DIR_ENV).map_or_else(|| PathBuf::from(DEFAULT_OUT_DIR), PathBuf::from)
}

fn parse_toml<T: serde::de::DeserializeOwned>(text: &str, origin: &Path) -> Result<T> {
    toml::from_str(text).map_err(|e| {
        let line = e.span().map_or(0, |s| text[..s.start].lines().count().max(1) as u64);
        Error::Parse { path: origin.to_path_buf(), line, msg: e.message().to_string() }
    })
}

/// Synthetic data request for the `simulate` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub sde: SdeSpec,
    pub plan: SimPlan,
}

impl SimulateConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        parse_toml(&text, path)
    }
}

// ---------------------------------------------------------------- CSV I/O

fn parse_err(path: &Path, line: u64, msg: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line, msg: msg.into() }
}

fn csv_reader(path: &Path, has_headers: bool) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().has_headers(has_headers).trim(csv::Trim::All).comment(Some(b'#')).from_reader(file))
}

fn check_header(rdr: &mut csv::Reader<fs::File>, path: &Path, expected: &[&str]) -> Result<()> {
    let header = rdr.headers().map_err(|e| parse_err(path, 1, e.to_string()))?;
    if header.iter().ne(expected.iter().copied()) {
        return Err(parse_err(path, 1, format!("expected header `{}`", expected.join(","))));
    }
    Ok(())
}

fn records<'a>(
    rdr: &'a mut csv::Reader<fs::File>,
    path: &Path,
    width: usize,
) -> impl Iterator<Item = Result<(u64, csv::StringRecord)>> + 'a {
    let path = path.to_path_buf();
    rdr.records().map(move |r| {
        let rec = r.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(&path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(parse_err(&path, line, format!("expected {width} fields, got {}", rec.len())));
        }
        Ok((line, rec))
    })
}

fn finite_field(path: &Path, line: u64, rec: &csv::StringRecord, i: usize, name: &str) -> Result<f64> {
    let v: f64 = rec[i].parse().map_err(|_| parse_err(path, line, format!("{name} `{}` is not a number", &rec[i])))?;
    if !v.is_finite() {
        return Err(parse_err(path, line, format!("{name} is not finite")));
    }
    Ok(v)
}

/// Reads a long-format `traj_id,t,x` CSV. Every trajectory must share one time axis.
pub fn read_ensemble_csv(path: &Path) -> Result<TrajectoryEnsemble> {
    let mut rdr = csv_reader(path, true)?;
    check_header(&mut rdr, path, &["traj_id", "t", "x"])?;
    let mut trajs: BTreeMap<u64, Vec<(f64, f64, u64)>> = BTreeMap::new();
    for item in records(&mut rdr, path, 3) {
        let (line, rec) = item?;
        let id: u64 = rec[0].parse().map_err(|_| parse_err(path, line, format!("traj_id `{}` is not an integer", &rec[0])))?;
        let t = finite_field(path, line, &rec, 1, "t")?;
        let x = finite_field(path, line, &rec, 2, "x")?;
        trajs.entry(id).or_default().push((t, x, line));
    }
    let Some(first) = trajs.values_mut().next() else {
        return Err(parse_err(path, 2, "no data rows"));
    };
    first.sort_by(|a, b| a.0.total_cmp(&b.0));
    let times: Vec<f64> = first.iter().map(|r| r.0).collect();
    if let Some(w) = first.windows(2).find(|w| w[1].0 == w[0].0) {
        return Err(parse_err(path, w[1].2, format!("duplicate time {}", w[1].0)));
    }
    let n = trajs.len();
    let mut data = vec![0.0; times.len() * n];
    for (r, (id, rows)) in trajs.iter_mut().enumerate() {
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        if rows.len() != times.len() {
            let line = rows.last().map_or(0, |r| r.2);
            return Err(parse_err(path, line, format!("trajectory {id} has {} rows, expected {}", rows.len(), times.len())));
        }
        for (k, &(t, x, line)) in rows.iter().enumerate() {
            if (t - times[k]).abs() > 1e-9 * t.abs().max(1.0) {
                return Err(parse_err(path, line, format!("trajectory {id} time {t} is off the shared time axis")));
            }
            data[k * n + r] = x;
        }
    }
    TrajectoryEnsemble::from_time_major(times, n, data)
}

pub fn write_ensemble_csv(ens: &TrajectoryEnsemble, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(ens.n_times() * ens.n_realizations() * 24 + 16);
    out.push_str("traj_id,t,x\n");
    for r in 0..ens.n_realizations() {
        for (k, &t) in ens.times().iter().enumerate() {
            let _ = writeln!(out, "{r},{t},{}", ens.level(k)[r]);
        }
    }
    write_file(path, out.as_bytes())
}

/// Reads an `x,f` CSV on a uniform grid and normalizes it.
pub fn read_density_csv(path: &Path, time: f64) -> Result<DensityField<f64>> {
    let mut rdr = csv_reader(path, true)?;
    check_header(&mut rdr, path, &["x", "f"])?;
    let (mut xs, mut fs_, mut lines) = (Vec::new(), Vec::new(), Vec::new());
    for item in records(&mut rdr, path, 2) {
        let (line, rec) = item?;
        let x = finite_field(path, line, &rec, 0, "x")?;
        let f = finite_field(path, line, &rec, 1, "f")?;
        if f < 0.0 {
            return Err(parse_err(path, line, format!("negative density {f}")));
        }
        xs.push(x);
        fs_.push(f);
        lines.push(line);
    }
    let n = xs.len();
    if n < 2 {
        return Err(parse_err(path, lines.last().copied().unwrap_or(1), "density needs at least two rows"));
    }
    let grid = Grid::new(xs[0], xs[n - 1], n).map_err(|e| parse_err(path, lines[0], e.to_string()))?;
    let h = grid.spacing();
    for (i, &x) in xs.iter().enumerate() {
        if (x - grid.node(i)).abs() > 1e-6 * h {
            return Err(parse_err(path, lines[i], format!("x = {x} breaks the uniform spacing {h}")));
        }
    }
    let mass = grid.integrate(&fs_);
    if !(mass > 0.0) {
        return Err(parse_err(path, lines[0], "density has zero mass"));
    }
    if (mass - 1.0).abs() > NORMALIZED_MASS_TOL {
        info!("{}: renormalizing density with mass {mass}", path.display());
    }
    DensityField::from_raw(grid, fs_, time)
}

pub fn write_density_csv(f: &DensityField<f64>, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(f.grid().len() * 48 + 4);
    out.push_str("x,f\n");
    for (i, v) in f.values().iter().enumerate() {
        let _ = writeln!(out, "{},{v}", f.grid().node(i));
    }
    write_file(path, out.as_bytes())
}

/// Reads `time,path` lines. A `time,path` header is optional; relative paths
/// resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<(f64, PathBuf)>> {
    let mut rdr = csv_reader(path, false)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, item) in records(&mut rdr, path, 2).enumerate() {
        let (line, rec) = item?;
        if i == 0 && &rec[0] == "time" && &rec[1] == "path" {
            continue;
        }
        let t = finite_field(path, line, &rec, 0, "time")?;
        let p = PathBuf::from(&rec[1]);
        out.push((t, if p.is_relative() { base.join(p) } else { p }));
    }
    if out.is_empty() {
        return Err(parse_err(path, 1, "manifest lists no densities"));
    }
    Ok(out)
}

/// Writes each density as `<prefix>_NNN.csv` plus a manifest; `times` label the manifest rows.
pub fn write_density_set(dir: &Path, prefix: &str, densities: &[DensityField<f64>], times: &[f64], manifest: &str) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut lines = String::from("time,path\n");
    for (i, (f, t)) in densities.iter().zip(times).enumerate() {
        let name = format!("{prefix}_{i:03}.csv");
        write_density_csv(f, &dir.join(&name))?;
        let _ = writeln!(lines, "{t},{name}");
    }
    let path = dir.join(manifest);
    write_file(&path, lines.as_bytes())?;
    Ok(path)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------- datasets

#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Ensemble(TrajectoryEnsemble),
    /// Time-ordered densities on the model grid.
    Densities(Vec<DensityField<f64>>),
}

impl Dataset {
    /// Model-coordinate times.
    pub fn times(&self) -> Vec<f64> {
        match self {
            Dataset::Ensemble(e) => e.times().to_vec(),
            Dataset::Densities(d) => d.iter().map(|f| f.time()).collect(),
        }
    }

    fn select(&self, range: std::ops::Range<usize>) -> Result<Self> {
        Ok(match self {
            Dataset::Ensemble(e) => Dataset::Ensemble(e.select_levels(range)?),
            Dataset::Densities(d) => Dataset::Densities(d[range].to_vec()),
        })
    }

    /// Densities on `grid`: KDE for ensembles, re-gridding for density lists.
    pub fn densities(&self, grid: &Grid<f64>, bandwidth: Bandwidth<f64>) -> Result<Vec<DensityField<f64>>> {
        match self {
            Dataset::Ensemble(e) => e
                .times()
                .iter()
                .enumerate()
                .map(|(k, &t)| {
                    kde_estimate(e.level(k), grid, bandwidth, t).map_err(|err| match err {
                        Error::ZeroVariance { .. } => Error::ZeroVariance { time: Some(t) },
                        err => err,
                    })
                })
                .collect(),
            Dataset::Densities(d) => d.iter().map(|f| regrid(f, grid)).collect(),
        }
    }

    fn moment_series(&self) -> Result<MomentSeries> {
        match self {
            Dataset::Ensemble(e) => Ok(moment_series(e)),
            Dataset::Densities(d) => MomentSeries::from_densities(d),
        }
    }
}

/// Linear interpolation onto `grid`, then renormalization. Identity on the same grid.
pub fn regrid(f: &DensityField<f64>, grid: &Grid<f64>) -> Result<DensityField<f64>> {
    if f.grid().same_as(grid) {
        return Ok(f.clone());
    }
    info!("re-gridding density at t = {} onto {} nodes", f.time(), grid.len());
    let values = grid.nodes().into_iter().map(|x| f.value_at(x)).collect();
    DensityField::from_raw(*grid, values, f.time())
}

/// Loads the configured input and applies the transform.
pub fn ingest(config: &RunConfig) -> Result<Dataset> {
    let kind = config.transform;
    match config.input.mode {
        InputMode::Ensemble => {
            let ens = read_ensemble_csv(&config.input.path)?;
            if ens.n_times() > 1 {
                ens.uniform_step()?;
            }
            let ens = if kind == TransformKind::Identity { ens } else { ens.transformed(kind)? };
            Ok(Dataset::Ensemble(ens))
        }
        InputMode::Densities => {
            let grid = config.model_grid()?;
            let mut entries = read_manifest(&config.input.path)?;
            entries.sort_by(|a, b| a.0.total_cmp(&b.0));
            if let Some(w) = entries.windows(2).find(|w| w[0].0 == w[1].0) {
                return Err(Error::arg(format!("manifest lists time {} twice", w[0].0)));
            }
            let mut out = Vec::with_capacity(entries.len());
            for (i, (t, p)) in entries.iter().enumerate() {
                let f = read_density_csv(p, *t)?;
                let f = if kind == TransformKind::Identity {
                    regrid(&f, &grid)?
                } else {
                    let seed = config.seed.wrapping_add(i as u64);
                    pullback_density(&f, kind, &grid, config.reconstruction_samples, seed)?
                };
                out.push(f);
            }
            Ok(Dataset::Densities(out))
        }
    }
}

/// Training `[truncate_start or t0, train_end]` and testing `(train_end, t_K]`, in model times.
pub fn split(dataset: &Dataset, train_end: f64, truncate_start: Option<f64>) -> Result<(Dataset, Dataset)> {
    let times = dataset.times();
    let tol = |t: f64| 1e-9 * t.abs().max(1.0);
    let start = truncate_start.unwrap_or(times[0]);
    let lo = times.iter().position(|&t| t >= start - tol(start)).unwrap_or(times.len());
    let hi = times.iter().rposition(|&t| t <= train_end + tol(train_end)).map_or(0, |i| i + 1);
    if lo >= hi {
        return Err(Error::EmptySplit("training"));
    }
    if hi == times.len() {
        return Err(Error::EmptySplit("testing"));
    }
    Ok((dataset.select(lo..hi)?, dataset.select(hi..times.len())?))
}

fn config_split(config: &RunConfig, dataset: &Dataset) -> Result<(Dataset, Dataset)> {
    let kind = config.transform;
    let end = kind.forward_t(config.split.train_end)?;
    let start = config.split.truncate_start.map(|t| kind.forward_t(t)).transpose()?;
    split(dataset, end, start)
}

// ---------------------------------------------------------------- artifact

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMetadata {
    pub method: CalibrationMethod,
    /// Training loss of the stored model.
    pub loss: f64,
    pub seed: u64,
    pub tool_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evaluations: Option<usize>,
}

/// Trained reduced-order model. Times and positions are in model coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RomArtifact {
    pub format_version: u32,
    pub grid: GridSpec,
    pub model: CoefficientModel<f64>,
    pub transform: TransformKind,
    pub initial_time: f64,
    /// Regularized initial density on `grid`.
    pub initial: Vec<f64>,
    pub training_window: [f64; 2],
    pub solver: SolverSettings,
    pub metadata: ArtifactMetadata,
}

impl RomArtifact {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != ARTIFACT_FORMAT {
            return Err(Error::arg(format!("unsupported artifact format {}", self.format_version)));
        }
        self.model.validate()?;
        let [a, b] = self.training_window;
        if !(a < b) {
            return Err(Error::arg(format!("empty training window [{a}, {b}]")));
        }
        self.initial_density().map(|_| ())
    }

    pub fn grid(&self) -> Result<Grid<f64>> {
        self.grid.build()
    }

    pub fn initial_density(&self) -> Result<DensityField<f64>> {
        DensityField::new(self.grid()?, self.initial.clone(), self.initial_time)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("artifact serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let a: RomArtifact = serde_json::from_str(text).map_err(|e| Error::Parse {
            path: PathBuf::from("<artifact>"),
            line: e.line() as u64,
            msg: e.to_string(),
        })?;
        a.validate()?;
        Ok(a)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Parse { line, msg, .. } => Error::Parse { path: path.to_path_buf(), line, msg },
            e => e,
        })
    }

    fn solve(&self, times: &[f64], allow_negative_diffusion: bool) -> Result<SolutionTrace<f64>> {
        let f0 = self.initial_density()?;
        let mut settings = self.solver.clone();
        settings.allow_negative_diffusion |= allow_negative_diffusion;
        let op = FpeOperator::new(f0.grid(), settings.accuracy_order, settings.boundary)?;
        solve_segmented(&op, &f0, &self.model, &settings.config(times.to_vec()))?.into_complete()
    }
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub artifact: RomArtifact,
    /// `key=value` run report.
    pub report: String,
    pub training: Dataset,
    pub testing: Dataset,
}

fn distance(kind: Distance, target: &DensityField<f64>, predicted: &DensityField<f64>) -> Result<f64> {
    match kind {
        Distance::Kl => kl_divergence(target, predicted),
        Distance::L2 => l2_distance_sq(target, predicted),
    }
}

/// Training loss of `model`; solver failures surface as errors.
fn model_loss(
    initial: &DensityField<f64>,
    targets: &[DensityField<f64>],
    model: &CoefficientModel<f64>,
    settings: &SolverSettings,
    kind: Distance,
) -> Result<f64> {
    if targets.is_empty() {
        return Ok(0.0);
    }
    let op = FpeOperator::new(initial.grid(), settings.accuracy_order, settings.boundary)?;
    let config = settings.config(targets.iter().map(|t| t.time()).collect());
    let trace = solve_segmented(&op, initial, model, &config)?.into_complete()?;
    targets.iter().zip(&trace.snapshots).map(|(t, p)| distance(kind, t, p)).sum()
}

/// Ingests, splits, builds densities, smooths the initial density and calibrates.
pub fn train(config: &RunConfig) -> Result<TrainOutput> {
    config.validate()?;
    let grid = config.model_grid()?;
    let dataset = ingest(config)?;
    let (training, testing) = config_split(config, &dataset)?;
    let densities = training.densities(&grid, config.bandwidth())?;
    if densities.len() < 2 {
        return Err(Error::EmptySplit("training (needs two time levels)"));
    }
    let initial = tikhonov_smooth(&densities[0], config.smoothing_lambda, config.smoothing_derivative)?;
    let targets = &densities[1..];
    let window = (initial.time(), targets[targets.len() - 1].time());
    let cal = &config.calibration;

    let regressed = || -> Result<CoefficientModel<f64>> {
        regress_time_only_coefficients(&training.moment_series()?, window, cal.drift_degree, cal.diffusion_degree)
    };
    let (model, loss, evaluations, status) = match cal.method {
        CalibrationMethod::MomentRegression => {
            let model = regressed()?;
            let loss = model_loss(&initial, targets, &model, &config.solver, cal.distance)?;
            (model, loss, None, None)
        }
        CalibrationMethod::LossMinimization => {
            let bounds: Vec<(f64, f64)> =
                cal.bounds.as_ref().expect("validated").iter().map(|&[lo, hi]| (lo, hi)).collect();
            let solver = config.solver.config(Vec::new());
            let mut problem =
                CalibrationProblem::new(initial.clone(), targets.to_vec(), cal.drift_degree, cal.diffusion_degree, bounds.clone(), solver)
                    .map_err(|e| match e {
                        Error::InvalidArgument(m) => Error::Config(m),
                        e => e,
                    })?
                    .with_distance(cal.distance);
            // warm start from the regression estimate, clamped into the bounds
            if let Ok(m) = regressed() {
                let mut start: Vec<f64> = m.drift_coefficients().to_vec();
                start.resize(cal.drift_degree + 1, 0.0);
                let mut d2 = m.diffusion_coefficients().to_vec();
                d2.resize(cal.diffusion_degree + 1, 0.0);
                start.extend(d2);
                let start = start.iter().zip(&bounds).map(|(&p, &(lo, hi))| p.clamp(lo, hi)).collect();
                problem = problem.with_start(start)?;
            }
            let optimizer = match cal.optimizer {
                OptimizerChoice::NelderMead => Optimizer::NelderMead,
                OptimizerChoice::RandomMultistartNelderMead => Optimizer::RandomMultistartNelderMead { seed: config.seed },
            };
            let result = calibrate(&problem, optimizer, cal.budget)?;
            if result.final_loss >= PENALTY {
                // surface the solver's own diagnostic
                model_loss(&initial, targets, &result.model, &config.solver, cal.distance)?;
                return Err(Error::Diverged { time: window.1 });
            }
            (result.model, result.final_loss, Some(result.evaluations), Some(result.status))
        }
    };

    let artifact = RomArtifact {
        format_version: ARTIFACT_FORMAT,
        grid: grid.spec(),
        model,
        transform: config.transform,
        initial_time: initial.time(),
        initial: initial.values().to_vec(),
        training_window: [window.0, window.1],
        solver: config.solver.clone(),
        metadata: ArtifactMetadata {
            method: cal.method,
            loss,
            seed: config.seed,
            tool_version: TOOL_VERSION.to_string(),
            evaluations,
        },
    };
    let report = train_report(config, &artifact, status)?;
    Ok(TrainOutput { artifact, report, training, testing })
}

fn train_report(config: &RunConfig, a: &RomArtifact, status: Option<Status>) -> Result<String> {
    let mut out = String::new();
    let _ = writeln!(out, "tool_version={TOOL_VERSION}");
    let _ = writeln!(out, "method={}", a.metadata.method.name());
    let _ = writeln!(out, "loss={}", a.metadata.loss);
    for (i, c) in a.model.drift_coefficients().iter().enumerate() {
        let _ = writeln!(out, "drift_{i}={c}");
    }
    for (i, c) in a.model.diffusion_coefficients().iter().enumerate() {
        let _ = writeln!(out, "diffusion_{i}={c}");
    }
    if let Some(n) = a.metadata.evaluations {
        let _ = writeln!(out, "evaluations={n}");
    }
    if let Some(s) = status {
        let _ = writeln!(out, "status={}", if s == Status::Converged { "converged" } else { "budget_exhausted" });
    }
    let _ = writeln!(out, "training_window={},{}", a.training_window[0], a.training_window[1]);
    let value = toml::Value::try_from(config).map_err(|e| Error::Config(e.to_string()))?;
    flatten_toml("config", &value, &mut out);
    Ok(out)
}

fn flatten_toml(prefix: &str, v: &toml::Value, out: &mut String) {
    match v {
        toml::Value::Table(t) => {
            for (k, v) in t {
                flatten_toml(&format!("{prefix}.{k}"), v, out);
            }
        }
        toml::Value::String(s) => {
            let _ = writeln!(out, "{prefix}={s}");
        }
        other => {
            let _ = writeln!(out, "{prefix}={other}");
        }
    }
}

/// [`train`], then writes the artifact and run report into `out_dir`.
pub fn run_train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutput> {
    let out = train(config)?;
    out.artifact.save(&out_dir.join(ARTIFACT_FILE))?;
    write_file(&out_dir.join(TRAIN_REPORT_FILE), out.report.as_bytes())?;
    Ok(out)
}

// ---------------------------------------------------------------- predict

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Model-coordinate densities.
    pub densities: Vec<DensityField<f64>>,
    /// Densities in original units; present only for non-identity transforms.
    pub reconstructed: Option<Vec<DensityField<f64>>>,
    /// Record times in original units.
    pub times: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PredictOptions {
    pub allow_negative_diffusion: bool,
    pub reconstruction_samples: usize,
}

impl Default for PredictOptions {
    fn default() -> Self {
        Self { allow_negative_diffusion: false, reconstruction_samples: default_reconstruction_samples() }
    }
}

/// Solves from the artifact's initial density to `times` (original units).
pub fn predict(artifact: &RomArtifact, times: &[f64], options: PredictOptions) -> Result<Prediction> {
    let kind = artifact.transform;
    let model_times = times.iter().map(|&t| kind.forward_t(t)).collect::<Result<Vec<_>>>()?;
    let densities = artifact.solve(&model_times, options.allow_negative_diffusion)?.snapshots;
    let reconstructed = if kind.transforms_x() {
        let out = densities
            .iter()
            .zip(times)
            .enumerate()
            .map(|(i, (f, &t))| {
                reconstruct(f, kind, artifact.grid.n_points, options.reconstruction_samples, artifact.metadata.seed.wrapping_add(i as u64), t)
            })
            .collect::<Result<Vec<_>>>()?;
        Some(out)
    } else {
        None
    };
    Ok(Prediction { densities, reconstructed, times: times.to_vec() })
}

/// Resamples `f`, maps back to original units and re-estimates on a grid spanning the samples.
fn reconstruct(f: &DensityField<f64>, kind: TransformKind, n_points: usize, n_samples: usize, seed: u64, time: f64) -> Result<DensityField<f64>> {
    let samples = rejection_sample(f, n_samples, seed)?
        .into_iter()
        .map(|y| kind.inverse_x(y))
        .collect::<Result<Vec<_>>>()?;
    let (lo, hi) = samples.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let pad = 0.05 * (hi - lo).max(f64::EPSILON * hi.abs().max(1.0));
    let grid = Grid::new((lo - pad).max(0.0), hi + pad, n_points)?;
    kde_estimate(&samples, &grid, Bandwidth::Auto, time)
}

/// [`predict`] and write per-time CSVs plus manifests into `out_dir`.
///
/// The last record time must lie beyond the training window.
pub fn run_predict(artifact: &RomArtifact, times: &[f64], options: PredictOptions, out_dir: &Path) -> Result<Prediction> {
    let kind = artifact.transform;
    let horizon = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let end = kind.inverse_t(artifact.training_window[1])?;
    if !(horizon > end) {
        return Err(Error::Config(format!("prediction horizon {horizon} does not extend past the training window end {end}")));
    }
    let p = predict(artifact, times, options)?;
    write_density_set(out_dir, "density", &p.densities, &p.times, MANIFEST_FILE)?;
    if let Some(r) = &p.reconstructed {
        write_density_set(out_dir, "reconstructed", r, &p.times, "reconstructed_manifest.csv")?;
    }
    Ok(p)
}

// ---------------------------------------------------------------- validate

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// Original units.
    pub time: f64,
    pub kl: f64,
    pub l1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub rows: Vec<MetricRow>,
}

impl ValidationReport {
    /// The final testing time, the headline comparison.
    pub fn final_row(&self) -> &MetricRow {
        self.rows.last().expect("non-empty report")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("time,kl,l1\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{}", r.time, r.kl, r.l1);
        }
        let f = self.final_row();
        let _ = writeln!(out, "# final time={} kl={} l1={}", f.time, f.kl, f.l1);
        out
    }
}

/// Per-time `KL(test ‖ predicted)` and L1 over the testing set.
pub fn validate(artifact: &RomArtifact, testing: &Dataset, bandwidth: Bandwidth<f64>, allow_negative_diffusion: bool) -> Result<ValidationReport> {
    let grid = artifact.grid()?;
    let tests = testing.densities(&grid, bandwidth)?;
    if tests.is_empty() {
        return Err(Error::EmptySplit("testing"));
    }
    let times: Vec<f64> = tests.iter().map(|f| f.time()).collect();
    let predicted = artifact.solve(&times, allow_negative_diffusion)?.snapshots;
    let rows = tests
        .iter()
        .zip(&predicted)
        .map(|(t, p)| {
            Ok(MetricRow {
                time: artifact.transform.inverse_t(t.time())?,
                kl: kl_divergence(t, p)?,
                l1: l1_distance(t, p)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationReport { rows })
}

/// Ingests and splits per `config`, validates on the testing part and writes `metrics.csv`.
pub fn run_validate(artifact: &RomArtifact, config: &RunConfig, allow_negative_diffusion: bool, out_dir: &Path) -> Result<ValidationReport> {
    if config.transform != artifact.transform {
        warn!("config transform {:?} differs from the artifact's {:?}; using the artifact's", config.transform, artifact.transform);
    }
    let config = RunConfig { transform: artifact.transform, ..config.clone() };
    let dataset = ingest(&config)?;
    let (_, testing) = config_split(&config, &dataset)?;
    let report = validate(artifact, &testing, config.bandwidth(), allow_negative_diffusion)?;
    write_file(&out_dir.join(METRICS_FILE), report.to_csv().as_bytes())?;
    Ok(report)
}

// ---------------------------------------------------------------- estimate, oracle

#[derive(Debug, Clone, PartialEq)]
pub struct EstimateReport {
    /// `(t, D1, D2)` from count-weighted conditional cells, model coordinates.
    pub km: Vec<(f64, f64, f64)>,
    pub regression: CoefficientModel<f64>,
}

impl EstimateReport {
    pub fn km_csv(&self) -> String {
        let mut out = String::from("t,d1,d2\n");
        for (t, a, b) in &self.km {
            let _ = writeln!(out, "{t},{a},{b}");
        }
        out
    }
}

/// Conditional Kramers-Moyal estimates and moment regression over the training part of an ensemble.
pub fn estimate(config: &RunConfig, n_bins: usize) -> Result<EstimateReport> {
    let dataset = ingest(config)?;
    let (training, _) = config_split(config, &dataset)?;
    let Dataset::Ensemble(ens) = &training else {
        return Err(Error::Config("estimate needs ensemble input".into()));
    };
    let d1 = bin_averaged(&conditional_km_coefficient(ens, 1, n_bins)?);
    let d2 = bin_averaged(&conditional_km_coefficient(ens, 2, n_bins)?);
    let mut km = Vec::with_capacity(d1.len());
    for &(t, a) in &d1 {
        if let Some(&(_, b)) = d2.iter().find(|(s, _)| *s == t) {
            km.push((t, a, b));
        }
    }
    let times = ens.times();
    let window = (times[0], times[times.len() - 1]);
    let cal = &config.calibration;
    let regression = regress_time_only_coefficients(&moment_series(ens), window, cal.drift_degree, cal.diffusion_degree)?;
    Ok(EstimateReport { km, regression })
}

/// Closed-form densities of `family` at `times` on `grid`, written as a density set.
pub fn write_oracle(family: Family<f64>, grid: &Grid<f64>, times: &[f64], out_dir: &Path) -> Result<PathBuf> {
    let densities = times.iter().map(|&t| family.density(grid, t)).collect::<Result<Vec<_>>>()?;
    write_density_set(out_dir, "oracle", &densities, times, MANIFEST_FILE)
}
