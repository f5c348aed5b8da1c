//! Crate-wide error type.
//!
//! Variants are grouped by how the CLI reports them: configuration and
//! input problems exit with code 1, numerical failures (blow-up, explosion,
//! corrupted rate index) with code 2. Failed statistical tests are not
//! errors; experiments report `pass = false` and the CLI maps that to
//! exit code 3.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at position {position}: {message}")]
    Parse { position: usize, message: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("model validation failed: {0}")]
    Model(String),

    #[error("grid size mismatch: expected {expected}, got {got}")]
    GridMismatch { expected: usize, got: usize },

    #[error("numerical blow-up: non-finite value at t = {time}")]
    NumericalBlowUp { time: f64 },

    #[error("limit trajectory never reaches level {level} before t = {horizon} (supremum {supremum})")]
    NotHit {
        level: f64,
        horizon: f64,
        supremum: f64,
    },

    #[error("hitting statistics need slope > 0, got {slope}")]
    HypothesisViolated { slope: f64 },

    #[error("replica {replica}: particle count {count} exceeded cap {cap} at t = {time}")]
    Explosion {
        replica: usize,
        time: f64,
        count: u64,
        cap: u64,
    },

    #[error("{exploded} of {replicas} replicas exploded (more than 1%); ensemble aborted")]
    ExplosionRate { exploded: usize, replicas: usize },

    #[error("experiment inconclusive: {0}")]
    Inconclusive(String),

    #[error("{experiment}: statistical test failed (see {report})")]
    StatTestFailed { experiment: String, report: String },

    #[error("need at least {need} samples, got {got}")]
    TooFewSamples { got: usize, need: usize },

    #[error("target variance must be positive, got {0}")]
    DegenerateVariance(f64),

    #[error("rate index corrupted beyond repair after rebuild (urn {urn})")]
    RateIndexCorrupt { urn: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code the CLI uses for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parse { .. }
            | Error::Config(_)
            | Error::Model(_)
            | Error::GridMismatch { .. }
            | Error::TooFewSamples { .. }
            | Error::DegenerateVariance(_)
            | Error::Io(_)
            | Error::Json(_) => 1,
            Error::NumericalBlowUp { .. }
            | Error::NotHit { .. }
            | Error::HypothesisViolated { .. }
            | Error::Explosion { .. }
            | Error::ExplosionRate { .. }
            | Error::RateIndexCorrupt { .. } => 2,
            // Statistical outcomes, not faults: the run itself was sound.
            Error::Inconclusive(_) | Error::StatTestFailed { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
