use thiserror::Error;

use crate::solver::SolveReport;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("index ({row}, {col}) out of range for {n_rows}x{n_cols} matrix")]
    IndexOutOfRange {
        row: usize,
        col: usize,
        n_rows: usize,
        n_cols: usize,
    },

    #[error("duplicate observation at ({row}, {col})")]
    DuplicateIndex { row: usize, col: usize },

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix is numerically rank deficient: sigma_{rank} = {sigma_r:e} vs sigma_1 = {sigma_1:e}")]
    RankDeficient {
        rank: usize,
        sigma_r: f64,
        sigma_1: f64,
    },

    #[error("input does not have orthonormal columns (||U^T U - I||_F = {deviation:e})")]
    NotOrthonormal { deviation: f64 },

    /// Residual norm at or below the theta floor; the square-root loss has no gradient here.
    #[error("exact fit: residual norm {residual_norm:e} is at or below the theta floor {floor:e}")]
    Kink { residual_norm: f64, floor: f64 },

    #[error("iterate diverged (non-finite values) at iteration {iteration}")]
    Diverged {
        iteration: usize,
        partial: Box<SolveReport>,
    },

    #[error("problem size n = {n} exceeds the dense solver limit {limit}")]
    TooLarge { n: usize, limit: usize },

    #[error("no groundtruth available: {0}")]
    NoGroundTruth(&'static str),

    #[error("non-positive value {value} at row {row} in log-log fit")]
    NonPositive { row: usize, value: f64 },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParameter {
        name,
        reason: reason.into(),
    }
}

pub(crate) fn shape_mismatch(
    context: &'static str,
    expected: (usize, usize),
    actual: (usize, usize),
) -> Error {
    Error::DimensionMismatch {
        context,
        expected: format!("{}x{}", expected.0, expected.1),
        actual: format!("{}x{}", actual.0, actual.1),
    }
}
