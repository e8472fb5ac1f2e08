use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("grid mismatch between operands")]
    GridMismatch,

    #[error("density is not normalized (trapezoidal mass {mass})")]
    Unnormalized { mass: f64 },

    #[error("need at least {needed} samples, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error(
        "samples have zero variance{}; use a delta-like initial density instead of a KDE",
        .time.map(|t| format!(" at t = {t}")).unwrap_or_default()
    )]
    ZeroVariance { time: Option<f64> },

    #[error("diffusion coefficient is negative ({value}) at t = {time}; set allow_negative_diffusion to override")]
    NegativeDiffusion { time: f64, value: f64 },

    #[error("explicit step dt = {dt} exceeds the stability bound {bound}")]
    Stability { dt: f64, bound: f64 },

    #[error("record time {time} is not an integer multiple of dt = {dt} from t0 = {t0}")]
    MisalignedRecordTime { time: f64, t0: f64, dt: f64 },

    #[error("numerical divergence at t = {time}")]
    Diverged { time: f64 },

    #[error("singular linear system")]
    Singular,

    #[error("ill-conditioned design matrix (condition number {cond:e})")]
    IllConditioned { cond: f64 },

    #[error("time axis is not uniform (step {index}: {step} vs {expected})")]
    NonUniformTime { index: usize, step: f64, expected: f64 },

    #[error("time {0} is not on the sampled time axis")]
    TimeNotSampled(f64),

    #[error("split leaves the {0} set empty")]
    EmptySplit(&'static str),

    #[error("{}:{line}: {msg}", .path.display())]
    Parse { path: PathBuf, line: u64, msg: String },

    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("infeasible configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Process exit code for this error class: 2 input, 3 divergence, 4 infeasible configuration.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Diverged { .. } | Error::Singular => 3,
            Error::NegativeDiffusion { .. }
            | Error::Stability { .. }
            | Error::MisalignedRecordTime { .. }
            | Error::IllConditioned { .. }
            | Error::Config(_) => 4,
            _ => 2,
        }
    }
}
