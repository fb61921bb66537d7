use thiserror::Error;

/// Errors produced by kernels, layouts, schedulers, and instrumentation.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    /// Operand shapes do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A row, column, block, or head index is out of range.
    #[error("index out of range: {0}")]
    Index(String),

    /// A configuration value is invalid or inconsistent.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// A caller violated an API contract (missing or stale artifacts, etc.).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A softmax row had no unmasked entries and the policy is `Error`.
    #[error("row {row} is fully masked and masked_row_policy is Error")]
    FullyMaskedRow { row: usize },

    /// An argument is outside the mathematical domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// No block-size candidate fits the block-local memory budget.
    #[error("no block-size candidate fits in {capacity_bytes} bytes of block-local memory")]
    Capacity { capacity_bytes: u64 },

    /// A parallel worker failed; partial outputs were discarded.
    #[error("parallel execution failed: {0}")]
    Execution(String),
}

pub type Result<T> = std::result::Result<T, Error>;
