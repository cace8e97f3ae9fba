use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("duplicate cell (i={i}, j={j})")]
    DuplicateCell { i: i64, j: i64 },

    #[error("missing field `{0}` in input header")]
    MissingField(String),

    #[error("non-finite value in field `{field}` at cell (i={i}, j={j})")]
    NonFiniteValue { field: String, i: i64, j: i64 },

    #[error("panel has no cells")]
    EmptyPanel,

    #[error("invalid selection rate {0}: must lie in (0, 1]")]
    InvalidRate(f64),

    #[error("sketch selected no cells")]
    EmptySketch,

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: String, found: String },

    #[error("singular design: condition number {condition:.3e}")]
    SingularDesign { condition: f64 },

    #[error("singular Hessian: condition number {condition:.3e}")]
    SingularHessian { condition: f64 },

    #[error("no convergence after {iterations} iterations{}", if *.separation { " (possible perfect separation)" } else { "" })]
    NonConvergence { iterations: usize, separation: bool },

    #[error("target variance unreachable: C*V_max = {target:.6e} <= irreducible component {gamma_a:.6e}")]
    TargetBelowIrreducible { target: f64, gamma_a: f64 },

    #[error("preliminary own-variance estimate is degenerate ({gamma_b:.3e})")]
    DegeneratePreliminary { gamma_b: f64 },

    #[error("no rows to report")]
    EmptyReport,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Stable machine-readable code, used in JSON error reports.
    pub fn code(&self) -> &'static str {
        match self {
            Error::DuplicateCell { .. } => "DuplicateCell",
            Error::MissingField(_) => "MissingField",
            Error::NonFiniteValue { .. } => "NonFiniteValue",
            Error::EmptyPanel => "EmptyPanel",
            Error::InvalidRate(_) => "InvalidRate",
            Error::EmptySketch => "EmptySketch",
            Error::DimensionMismatch { .. } => "DimensionMismatch",
            Error::SingularDesign { .. } => "SingularDesign",
            Error::SingularHessian { .. } => "SingularHessian",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::TargetBelowIrreducible { .. } => "TargetBelowIrreducible",
            Error::DegeneratePreliminary { .. } => "DegeneratePreliminary",
            Error::EmptyReport => "EmptyReport",
            Error::InvalidArgument(_) => "InvalidArgument",
            Error::Csv(_) => "Csv",
            Error::Io(_) => "Io",
        }
    }

    /// Failures of the estimation itself, as opposed to bad input.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::EmptySketch
                | Error::SingularDesign { .. }
                | Error::SingularHessian { .. }
                | Error::NonConvergence { .. }
                | Error::TargetBelowIrreducible { .. }
                | Error::DegeneratePreliminary { .. }
        )
    }
}
