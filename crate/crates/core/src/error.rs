use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("time {t} outside [0, {horizon}]")]
    OutOfRange { t: f64, horizon: f64 },

    #[error("incompatible grids: {0}")]
    IncompatibleGrids(String),

    #[error("invalid control: {0}")]
    InvalidControl(String),

    #[error("invalid MDP tilt: {0}")]
    InvalidMdpTilt(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("no convergence after {iters} iterations (last residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("incompatible frozen law: {0}")]
    IncompatibleFrozenLaw(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invariant failure: {0}")]
    InvariantFailure(String),

    /// A skeleton solve failed while the optimizer was evaluating a control.
    #[error("skeleton failure during optimization: {source}")]
    Optimization {
        #[source]
        source: Box<Error>,
        control: Vec<f64>,
    },

    #[error("model specification: {0}")]
    Model(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag, used in JSON error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidArgument(_) => "invalid-argument",
            Error::OutOfRange { .. } => "out-of-range",
            Error::IncompatibleGrids(_) => "incompatible-grids",
            Error::InvalidControl(_) => "invalid-control",
            Error::InvalidMdpTilt(_) => "invalid-mdp-tilt",
            Error::Numeric(_) => "numeric-error",
            Error::Diverged { .. } => "diverged",
            Error::NoConvergence { .. } => "no-convergence",
            Error::IncompatibleFrozenLaw(_) => "incompatible-frozen-law",
            Error::Unsupported(_) => "unsupported",
            Error::InvariantFailure(_) => "invariant-failure",
            Error::Optimization { .. } => "optimization-failure",
            Error::Model(_) => "model-error",
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => "file-not-found",
            Error::Io(_) => "io-error",
            Error::Csv(_) => "csv-error",
            Error::Json(_) => "json-error",
        }
    }

    /// True for failures of the numerics rather than of the inputs.
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::Numeric(_)
                | Error::Diverged { .. }
                | Error::NoConvergence { .. }
                | Error::Optimization { .. }
                | Error::InvariantFailure(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
