//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, inference, and simulation.
#[derive(Debug, Error)]
pub enum Error {
    /// Malformed or out-of-range input (non-finite entries, bad ranges,
    /// violated type invariants).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// Operands whose shapes do not line up.
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    /// The model is singular (e.g. a spike weight at the boundary, or a
    /// non-invertible averaged precision).
    #[error("singular model: {0}")]
    SingularModel(String),

    /// The projected scatter V'S_kV is singular for the named group.
    #[error("degenerate projection for group {group}: {detail}")]
    DegenerateProjection { group: usize, detail: String },

    /// No residual variance left outside the subspace for the named group.
    #[error("degenerate noise estimate for group {group}: {detail}")]
    DegenerateNoise { group: usize, detail: String },

    /// A conditional posterior collapsed (e.g. a nonpositive inverse-gamma rate).
    #[error("degenerate posterior: {0}")]
    DegeneratePosterior(String),

    /// The optimizer hit a non-finite objective or could not make progress.
    #[error("optimization failed: {0}")]
    Optimization(String),

    /// The goodness-of-fit denominator is not positive; the assumed subspace
    /// dimension is likely too large for the estimated noise level.
    #[error(
        "goodness-of-fit denominator is not positive ({value:.6e}); \
         try a smaller subspace dimension or a re-estimated noise variance"
    )]
    GofDenominator { value: f64 },

    /// Failure writing an output stream.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// True for errors arising from numerical degeneracy at run time rather
    /// than from malformed input. CLI layers map these to a distinct exit code.
    pub fn is_numerical(&self) -> bool {
        !matches!(
            self,
            Error::InvalidInput(_) | Error::DimensionMismatch(_) | Error::Io(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
