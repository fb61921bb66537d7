//! Exact attention computed block by block, with cost accounting.
//!
//! The centerpiece is a tiled attention kernel that never materializes the
//! full score matrix: the forward pass keeps a running row maximum and a
//! running exponential sum while streaming key/value blocks, and the
//! backward pass recomputes probability blocks from a stored per-row
//! logsumexp. Outputs are exact, not approximations; tiling changes where
//! intermediate values live, not what is computed.
//!
//! Everything runs against a two-level memory model. Kernel-interface
//! arrays stand in for device memory, block-local buffers for on-chip
//! scratch, and [`instrument::CostCounters`] tallies traffic on both
//! levels alongside matmul and non-matmul FLOPs, so the crate can be used
//! to study how tiling, masking, head sharing, and scheduling decisions
//! move work and bytes around.
//!
//! Modules:
//!
//! * [`matrix`]: small dense row-major matrices and the matmul primitives.
//! * [`config`]: attention and blocking configuration.
//! * [`naive`]: quadratic-memory reference implementations used as
//!   oracles.
//! * [`flash`]: the tiled forward and backward kernels.
//! * [`heads`]: multi-head, grouped-query, and multi-query layouts.
//! * [`scheduler`]: parallel execution of block work units and block-size
//!   autotuning.
//! * [`instrument`]: counters, the roofline cost model, and runtime
//!   prediction.

pub mod config;
pub mod error;
pub mod flash;
pub mod heads;
pub mod instrument;
pub mod matrix;
pub mod naive;
pub mod scheduler;

pub use config::{
    AccumPrecision, AttentionConfig, BlockSpec, MaskedRowPolicy, DEFAULT_BLOCK_COLS,
    DEFAULT_BLOCK_ROWS,
};
pub use error::{Error, Result};
pub use flash::{
    causal_block_classification, finalize_output, flash_backward, flash_backward_from_stats,
    flash_forward, flash_forward_eager_rescale, flash_forward_into, flash_forward_with_stats,
    online_softmax_step, rowwise_dot, CausalBlockClass, FlashForwardResult, SoftmaxStats,
};
pub use heads::{
    multihead_backward, multihead_forward, BatchedGradients, BatchedTensors, ForwardArtifacts,
    HeadLayout,
};
pub use instrument::{
    effective_flops_ratio, flops_backward_model, flops_forward_model, predict_runtime,
    CostCounters, CostModel, RooflineBound,
};
pub use matrix::{matmul, rowmax, rowsum, Matrix, RowVector};
pub use naive::{
    attention_backward_naive, attention_forward_naive, softmax_backward_row, softmax_rows,
    softmax_rows_unshifted_f32, NaiveForwardResult,
};
pub use scheduler::{
    autotune_block_sizes, block_footprint_bytes, plan_backward, plan_forward,
    run_backward_parallel, run_forward_parallel, AutotuneOutcome, DqMerge, SchedulerConfig,
    TuneRecord, UnitKind, WorkUnit,
};
