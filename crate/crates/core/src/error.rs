use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// Variants are grouped by how a driver should react to them: configuration
/// and input problems (`Config`, `Parse`, `Shape`, ...) versus numeric
/// failures (`Instability`, `NonFinite`, `Divergence`, ...).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("packing failure: {0}")]
    Packing(String),

    #[error("simulation unstable at t = {time:.6} s: speed {speed:.3} m/s exceeds {limit:.3} m/s")]
    Instability { time: f64, speed: f64, limit: f64 },

    #[error("grid too shallow: need depth {needed:.4} m, grid covers {available:.4} m")]
    Depth { needed: f64, available: f64 },

    #[error("no active cells in the sample set")]
    EmptyActiveSet,

    #[error("degenerate statistics: standard deviation of {0} is zero")]
    DegenerateStats(String),

    #[error("too few instances: need at least {needed}, got {got}")]
    TooFewInstances { needed: usize, got: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("degenerate denominator in target field at tau = {0}")]
    DegenerateDenominator(f64),

    #[error("missing paired data: {0}")]
    Pairing(String),

    #[error("empty mask")]
    EmptyMask,

    #[error("zero variance in masked series")]
    ZeroVariance,

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("parse error in {path}{}: {msg}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Parse {
        path: PathBuf,
        line: Option<usize>,
        msg: String,
    },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    /// Parse failure not yet attributed to a file.
    pub fn parse(msg: impl Into<String>) -> Self {
        Error::Parse {
            path: PathBuf::new(),
            line: None,
            msg: msg.into(),
        }
    }

    /// Attaches `path` to a parse error; other errors pass through.
    pub fn at_path(self, path: &std::path::Path) -> Self {
        match self {
            Error::Parse { line, msg, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                msg,
            },
            other => other,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for failures caused by bad input or configuration rather than
    /// numerics.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Config(_)
                | Error::Parse { .. }
                | Error::Shape(_)
                | Error::Pairing(_)
                | Error::ArchMismatch(_)
                | Error::Depth { .. }
                | Error::TooFewInstances { .. }
                | Error::Io { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
