use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Broad failure class, used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("expected {expected:.3e} events exceeds the budget of {budget} events")]
    Capacity { expected: f64, budget: u64 },

    #[error("intensity grid step {grid_dt:.3e} s is coarser than T/10 = {limit:.3e} s")]
    GridTooCoarse { grid_dt: f64, limit: f64 },

    #[error("rate·T = {product:.3} must be below 1 for the antibunched emitter")]
    InfeasibleRate { product: f64 },

    #[error("time tags must be strictly ascending (index {index}: {previous} ps then {current} ps)")]
    Unsorted {
        index: usize,
        previous: u64,
        current: u64,
    },

    #[error("time tag {tag} ps lies outside the record duration {duration} ps")]
    TagOutOfRange { tag: u64, duration: u64 },

    #[error("stream on channel {channel} is empty")]
    EmptyStream { channel: u8 },

    #[error("need at least {needed} tags, got {got}")]
    InsufficientData { needed: usize, got: usize },

    #[error("waiting-time distribution truncated: omega(t_max) = {omega_end:.3e} >= 1e-6")]
    Truncation { omega_end: f64 },

    #[error("integration step too coarse: eta·P·delta = {value:.3} > 0.1 at dt = {dt:.3e} s")]
    Instability { value: f64, dt: f64 },

    #[error("step-halving did not converge (relative change {change:.2e})")]
    NotConverged { change: f64 },

    #[error("rate {rate:.3e} /s is above the validated ceiling of {ceiling:.1e} /s for tabulated TER curves")]
    RateCeiling { rate: f64, ceiling: f64 },

    #[error("every point of the rate curve failed; first failure: {first}")]
    AllPointsFailed { first: Box<Error> },

    #[error("fit window [{t_min:.3e}, {t_max:.3e}] s contains too few populated bins")]
    WindowEmpty { t_min: f64, t_max: f64 },

    #[error("exponential tail fit rejected: residual {residual:.4} >= 0.05")]
    PoorFit { residual: f64 },

    #[error("efficiency curve spans R in [{covered_min:.3e}, {covered_max:.3e}] /s but [{needed_min:.3e}, {needed_max:.3e}] /s is required")]
    Coverage {
        needed_min: f64,
        needed_max: f64,
        covered_min: f64,
        covered_max: f64,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParameter { .. }
            | Error::GridTooCoarse { .. }
            | Error::InfeasibleRate { .. }
            | Error::Unsorted { .. }
            | Error::TagOutOfRange { .. }
            | Error::EmptyStream { .. }
            | Error::InsufficientData { .. }
            | Error::Coverage { .. }
            | Error::RateCeiling { .. }
            | Error::Capacity { .. } => ErrorKind::Validation,
            Error::Truncation { .. }
            | Error::Instability { .. }
            | Error::NotConverged { .. }
            | Error::AllPointsFailed { .. }
            | Error::WindowEmpty { .. }
            | Error::PoorFit { .. } => ErrorKind::Numerical,
            Error::Parse { .. } | Error::Io(_) => ErrorKind::Io,
        }
    }

    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }
}
