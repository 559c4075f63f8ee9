use thiserror::Error;

use crate::data::Side;

/// Errors raised by ingestion, estimation and inference.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("missing column `{0}`")]
    MissingColumn(String),

    #[error("row {row}: cannot parse `{value}` in column `{column}`")]
    Parse {
        row: usize,
        column: String,
        value: String,
    },

    #[error("{side} side has {count} observations, need at least 2")]
    EmptySide { side: Side, count: usize },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("{side} side: {effective_n} observations in window, need at least {required}")]
    InsufficientData {
        side: Side,
        effective_n: usize,
        required: usize,
    },

    #[error("{side} side: local design matrix is rank deficient")]
    SingularFit { side: Side },

    #[error("kernel moment matrix is singular")]
    SingularDesign,

    #[error("grid is empty after trimming")]
    EmptyGrid,

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("curves are defined on different grids")]
    GridMismatch,

    #[error("effect is identically zero; ratio undefined")]
    DegenerateNull,

    #[error("shifted Legendre order {0} exceeds the supported maximum of 60")]
    OrderTooLarge(usize),

    #[error("first stage {jump:.3e} is below tolerance {tolerance:.3e}")]
    WeakFirstStage { jump: f64, tolerance: f64 },

    #[error("eigenvalue decay exponent must exceed 1, got {0}")]
    BadDecayParam(f64),

    #[error("leading eigenvalue is zero; eigenvalue test undefined")]
    DegenerateSpectrum,

    #[error("sample sizes differ: {left} vs {right}")]
    SizeMismatch { left: usize, right: usize },

    #[error("no analytic truth available for {0}")]
    NoAnalyticTruth(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short machine-readable tag for the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io(_) => "Io",
            Error::Csv(_) => "Csv",
            Error::MissingColumn(_) => "MissingColumn",
            Error::Parse { .. } => "ParseError",
            Error::EmptySide { .. } => "EmptySide",
            Error::InvalidDataset(_) => "InvalidDataset",
            Error::InsufficientData { .. } => "InsufficientData",
            Error::SingularFit { .. } => "SingularFit",
            Error::SingularDesign => "SingularDesign",
            Error::EmptyGrid => "EmptyGrid",
            Error::InvalidGrid(_) => "InvalidGrid",
            Error::GridMismatch => "GridMismatch",
            Error::DegenerateNull => "DegenerateNull",
            Error::OrderTooLarge(_) => "OrderTooLarge",
            Error::WeakFirstStage { .. } => "WeakFirstStage",
            Error::BadDecayParam(_) => "BadDecayParam",
            Error::DegenerateSpectrum => "DegenerateSpectrum",
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::NoAnalyticTruth(_) => "NoAnalyticTruth",
            Error::InvalidConfig(_) => "InvalidConfig",
        }
    }
}
