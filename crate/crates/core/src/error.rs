use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, RiskError>;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("invalid parameter `{name}` = {value}: {constraint}")]
    InvalidParameter {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },

    #[error("invalid contract: {0}")]
    InvalidContract(String),

    #[error("contract expired: time {time_now} is not before maturity {maturity}")]
    ExpiredContract { time_now: f64, maturity: f64 },

    #[error("importance and work estimates must be positive (index {index})")]
    InvalidImportance { index: usize },

    #[error("stratified allocation needs at least one positive sigma estimate")]
    DegenerateAllocation,

    #[error("portfolio generation failed: {0}")]
    GenerationFailure(String),

    #[error("start-level selection needs pilot statistics")]
    MissingPilot,

    #[error("tolerance {tol} unreachable: bias estimate {bias} at level cap {max_level}")]
    ToleranceUnreachable { tol: f64, bias: f64, max_level: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("manifest parse error at line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("I/O error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RiskError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        RiskError::Io {
            path: path.into(),
            source,
        }
    }
}

pub(crate) fn ensure(cond: bool, name: &'static str, value: f64, constraint: &'static str) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(RiskError::InvalidParameter {
            name,
            value,
            constraint,
        })
    }
}
