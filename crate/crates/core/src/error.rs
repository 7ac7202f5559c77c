use thiserror::Error;

use crate::tape::TapeError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("model violation: {0}")]
    ModelViolation(String),
    #[error("subject sent a message to the environment in a silent-subject audit")]
    SilentViolation,
    #[error("enumeration cap of {cap} leaves exceeded")]
    EnumerationCap { cap: usize },
    #[error("invalid adversary: {0}")]
    InvalidAdversary(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("degenerate parameters: {0}")]
    Degenerate(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("tape split violation: region {region} read past its {budget}-bit share")]
    SplitViolation { region: u32, budget: u64 },
    #[error("rejection sampling gave up after {attempts} attempts")]
    CappedSampling { attempts: usize },
    #[error("state universe exceeds bound {bound}")]
    StateBound { bound: usize },
    #[error("unknown name: {0}")]
    UnknownName(String),
}
