use thiserror::Error;

/// Errors produced anywhere in the simulation toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("configuration error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },

    #[error("integration diverged at t = {t} s (dt = {dt} s): non-finite state")]
    IntegrationDiverged { t: f64, dt: f64 },

    #[error("disturbance evaluation produced a non-finite wrench at t = {t} s")]
    Disturbance { t: f64 },

    #[error("GP fit failed: {0} (add jitter via noise_var > 0 or remove duplicate inputs)")]
    GpFit(String),

    #[error("GP sampling failed: posterior covariance not positive definite after jitter {jitter:e}")]
    GpSampling { jitter: f64 },

    #[error("contact solver stalled after {sweeps} sweeps, residual {residual:e}")]
    SolverStall { sweeps: usize, residual: f64 },

    #[error("MPC solver failure: {0}")]
    Solver(String),

    #[error("non-finite network output: parameters corrupted")]
    ParameterCorruption,

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("environment {env} failed: {source}")]
    Env {
        env: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("step {step} failed: {source}")]
    Step {
        step: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("verification mismatch: {0}")]
    Mismatch(String),

    #[error("I/O error: {0}")]
    Io(String),
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    /// Strips `Step`/`Env` wrappers.
    pub fn root(&self) -> &Error {
        match self {
            Error::Step { source, .. } | Error::Env { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for failures of a numerical method (integration, solvers, sampling).
    pub fn is_numerical(&self) -> bool {
        matches!(
            self.root(),
            Error::IntegrationDiverged { .. }
                | Error::Disturbance { .. }
                | Error::GpFit(_)
                | Error::GpSampling { .. }
                | Error::SolverStall { .. }
                | Error::Solver(_)
                | Error::ParameterCorruption
        )
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
