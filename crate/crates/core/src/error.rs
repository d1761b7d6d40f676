use thiserror::Error;

use crate::expr::{EvalError, ParseError};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expression parse error: {0}")]
    Parse(#[from] ParseError),
    #[error("expression evaluation failed at {location}: {source}")]
    Eval {
        location: String,
        #[source]
        source: EvalError,
    },
    #[error("band violates 0<σ̲≤σ̄: sigma_lo={sigma_lo}, sigma_hi={sigma_hi}")]
    InvalidBand { sigma_lo: f64, sigma_hi: f64 },
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("CFL condition violated: sigma_hi^2*dt/dx^2 = {cfl} > 1")]
    CflViolated { cfl: f64 },
    #[error("non-finite value of {what} at {location}")]
    NonFinite { what: &'static str, location: String },
    #[error("Picard iteration failed to contract: interval length fell below one time step at t={t}")]
    NonContraction { t: f64 },
    #[error("Picard iteration did not reach tol={tol} within {max_iter} iterations on [{a}, {b}] (last residual {residual})")]
    NotConverged {
        a: f64,
        b: f64,
        tol: f64,
        max_iter: usize,
        residual: f64,
    },
    #[error("generator depends on y; use the Picard solver")]
    GeneratorDependsOnY,
    #[error("volatility {sigma} outside band [{lo}, {hi}]")]
    ControlOutOfBand { sigma: f64, lo: f64, hi: f64 },
    #[error("at least one control is required")]
    EmptyControls,
    #[error("index {index} out of range (max {max})")]
    IndexOutOfRange { index: usize, max: usize },
    #[error("problems are not comparable: {0}")]
    Incompatible(String),
    #[error("comparison hypotheses not satisfied: {0}")]
    AuditFailed(String),
    #[error("problem file: {0}")]
    Schema(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn eval(location: impl Into<String>, source: EvalError) -> Self {
        Error::Eval {
            location: location.into(),
            source,
        }
    }
}
