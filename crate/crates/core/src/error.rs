use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("shape mismatch: {0}")]
    Mismatch(String),

    #[error("derivative order {requested} exceeds the maximum order {max}")]
    DerivativeOrder { requested: usize, max: usize },

    #[error("Gram matrix of the collision invariants is singular (degenerate grid)")]
    SingularGram,

    #[error("degenerate measure: {0}")]
    DegenerateMeasure(String),

    #[error("symmetry defect {defect:.3e} exceeds threshold {threshold:.3e}")]
    SymmetryDefect { defect: f64, threshold: f64 },

    #[error("eigensolver failure: {0}")]
    Eigensolver(String),

    #[error("operator of size {size} exceeds the dense limit {limit}")]
    TooLarge { size: usize, limit: usize },

    #[error("norm blow-up at t = {t}: {norm:.3e} exceeds {limit:.3e}")]
    BlowUp { t: f64, norm: f64, limit: f64 },
}

impl Error {
    pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter { name, reason: reason.into() }
    }
}
