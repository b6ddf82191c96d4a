//! Error type shared by every module in the crate.

use thiserror::Error;

/// Crate-wide error enumeration.
///
/// Numerical routines return `Err` rather than panicking so that the CLI and
/// the C ABI can report failures with context; panics are reserved for
/// internal invariant violations.
#[derive(Debug, Error)]
pub enum Error {
    /// Two fields (or a field and an operator table) live on different grids.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// An input failed a precondition (bad dimension, non-power-of-two size,
    /// out-of-range parameter, malformed config value, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An iterative solver stopped above its residual tolerance.
    #[error("{solver} did not converge: residual {residual:.3e} after {iters} iterations (tol {tol:.3e})")]
    Convergence {
        solver: &'static str,
        residual: f64,
        iters: usize,
        tol: f64,
    },

    /// Newton decomposition left the trust region or met a singular Jacobian.
    #[error("outside decomposition basin: {0}")]
    OutsideBasin(String),

    /// A field contained non-finite values where finite data was required.
    #[error("non-finite field values: {0}")]
    NonFinite(String),

    /// The gauge transform met a wave field with a real part above tolerance.
    #[error("non-conservative gauge: max |Re W| = {0:.3e}")]
    NonConservativeGauge(f64),

    /// Filesystem / serialization problems.
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed snapshot or header data.
    #[error("format: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
