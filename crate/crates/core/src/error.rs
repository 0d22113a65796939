use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("singularity: {0}")]
    Singularity(String),

    #[error("non-finite value produced: {0}")]
    NonFinite(String),

    #[error("newton did not converge after {iterations} iterations (residual {residual:.3e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("singular jacobian in {context}")]
    SingularJacobian { context: String },

    #[error("energy constraint has no admissible root: {0}")]
    NoEnergyRoot(String),

    #[error("scheme `{0}` requires a separable system")]
    RequiresSeparable(String),

    #[error("unknown key `{key}`; valid keys: {valid}")]
    UnknownKey { key: String, valid: String },

    #[error("generating function chart is singular (conditioning {conditioning:.3e})")]
    SingularGeneratingFunction { conditioning: f64 },

    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    #[error("control elimination failed: {0}")]
    EliminationFailed(String),

    #[error("singular shooting sensitivity (possible conjugate point), residual {residual:.3e}")]
    SingularSensitivity { residual: f64 },

    #[error("shooting did not converge after {iterations} iterations (residual {residual:.3e})")]
    ShootingDiverged { iterations: usize, residual: f64 },

    #[error("step {step} failed: {source}")]
    StepFailed {
        step: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn at_step(self, step: usize) -> Self {
        match self {
            e @ Error::StepFailed { .. } => e,
            e => Error::StepFailed { step, source: Box::new(e) },
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
