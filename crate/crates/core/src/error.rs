use thiserror::Error;

/// Errors raised by the engine. Variants name the failed precondition.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("root finding did not converge after {iterations} iterations (bracket width {width:e})")]
    NonConvergence { iterations: usize, width: f64 },

    #[error("survival probability {survival:e} at elapsed time {elapsed} is below the underflow floor")]
    Underflow { elapsed: f64, survival: f64 },

    #[error("grid step {step:e} is too coarse for mesh {mesh} (need step <= mesh^2/100)")]
    GridTooCoarse { step: f64, mesh: f64 },

    #[error("quadrature failed to reach tolerance {tolerance:e} on [{a}, {b}]")]
    QuadratureFailure { a: f64, b: f64, tolerance: f64 },

    #[error("coordinate {coordinate} out of range for dimension {dimension}")]
    CoordinateOutOfRange { coordinate: usize, dimension: usize },

    #[error("functional evaluation failed at event {event}: {message}")]
    Evaluation { event: usize, message: String },

    #[error("rejection sampler accepted {accepted} of {budget} proposals (need at least {required})")]
    RejectionStarvation { accepted: usize, budget: usize, required: usize },

    #[error("Monte Carlo budget too small: standard error {stderr:e} exceeds tolerance {tolerance:e}")]
    BudgetTooSmall { stderr: f64, tolerance: f64 },

    #[error("mode mismatch: {0}")]
    ModeMismatch(String),

    #[error("no crossing of level {level} before the end of the path at t = {end}")]
    HorizonExceeded { level: f64, end: f64 },

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("regression ill-conditioned at layer {layer}: pivot {pivot:e}")]
    IllConditioned { layer: usize, pivot: f64 },

    #[error("contraction violated: mesh^2 * lipschitz = {value} >= 1")]
    ContractionViolation { value: f64 },

    #[error("terminal constraint violated by perturbation {index}: |integral| = {value:e}")]
    TerminalMismatch { index: usize, value: f64 },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
