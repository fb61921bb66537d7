//! Block geometry and per-call kernel configuration.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Tiling of an `n x n` score matrix into `tr x tc` blocks of at most
/// `block_rows x block_cols` scores. Final blocks may be ragged; the kernels
/// use block extents, never padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockSpec {
    pub block_rows: usize,
    pub block_cols: usize,
    pub tr: usize,
    pub tc: usize,
    seq_len: usize,
}

impl BlockSpec {
    pub fn new(block_rows: usize, block_cols: usize, seq_len: usize) -> Result<Self> {
        if block_rows == 0 || block_cols == 0 {
            return Err(Error::Config(format!(
                "block sizes must be at least 1, got {block_rows}x{block_cols}"
            )));
        }
        if seq_len == 0 {
            return Err(Error::Config("sequence length must be at least 1".into()));
        }
        Ok(BlockSpec {
            block_rows,
            block_cols,
            tr: seq_len.div_ceil(block_rows),
            tc: seq_len.div_ceil(block_cols),
            seq_len,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Global row indices covered by row block `i`.
    pub fn row_range(&self, i: usize) -> Result<Range<usize>> {
        if i >= self.tr {
            return Err(Error::Index(format!(
                "row block {i} out of range (tr = {})",
                self.tr
            )));
        }
        let start = i * self.block_rows;
        Ok(start..(start + self.block_rows).min(self.seq_len))
    }

    /// Global column indices covered by column block `j`.
    pub fn col_range(&self, j: usize) -> Result<Range<usize>> {
        if j >= self.tc {
            return Err(Error::Index(format!(
                "column block {j} out of range (tc = {})",
                self.tc
            )));
        }
        let start = j * self.block_cols;
        Ok(start..(start + self.block_cols).min(self.seq_len))
    }
}

/// Precision of the running accumulators inside the tiled kernels.
///
/// `Full` keeps every accumulator in f64. `Reduced` rounds the running
/// statistics and partial outputs to f32 after each block update, the
/// desk-scale analog of low-precision accumulation; it loosens oracle
/// agreement from 1e-5 to 1e-3 and makes rescaling order observable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AccumPrecision {
    #[default]
    Full,
    Reduced,
}

/// What to do when a softmax row has no unmasked entries.
///
/// Standard causal attention always leaves at least the diagonal unmasked,
/// so a fully masked row almost certainly means a caller bug; the default
/// surfaces it as an error. `ZeroOutput` instead emits a zero row with a
/// logsumexp of `-inf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskedRowPolicy {
    #[default]
    Error,
    ZeroOutput,
}

/// Per-call configuration shared by the reference and tiled kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub seq_len: usize,
    pub head_dim: usize,
    pub causal: bool,
    /// Multiplier applied to the raw score matrix before the softmax; the
    /// running maxima therefore track scaled logits.
    pub softmax_scale: f64,
    pub block: BlockSpec,
    /// Kernels in this crate are unconditionally deterministic for a fixed
    /// schedule; the flag additionally pins gradient reduction order in the
    /// parallel scheduler.
    pub deterministic: bool,
    pub accum_precision: AccumPrecision,
    pub masked_row_policy: MaskedRowPolicy,
}

pub const DEFAULT_BLOCK_ROWS: usize = 64;
pub const DEFAULT_BLOCK_COLS: usize = 64;

impl AttentionConfig {
    /// Non-causal config with scale `1/sqrt(head_dim)` and 64x64 blocks.
    pub fn new(seq_len: usize, head_dim: usize) -> Result<Self> {
        if head_dim == 0 {
            return Err(Error::Config("head_dim must be at least 1".into()));
        }
        Ok(AttentionConfig {
            seq_len,
            head_dim,
            causal: false,
            softmax_scale: 1.0 / (head_dim as f64).sqrt(),
            block: BlockSpec::new(DEFAULT_BLOCK_ROWS, DEFAULT_BLOCK_COLS, seq_len)?,
            deterministic: true,
            accum_precision: AccumPrecision::Full,
            masked_row_policy: MaskedRowPolicy::Error,
        })
    }

    pub fn with_causal(mut self, causal: bool) -> Self {
        self.causal = causal;
        self
    }

    pub fn with_block_sizes(mut self, block_rows: usize, block_cols: usize) -> Result<Self> {
        self.block = BlockSpec::new(block_rows, block_cols, self.seq_len)?;
        Ok(self)
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.softmax_scale = scale;
        self
    }

    pub fn with_accum_precision(mut self, precision: AccumPrecision) -> Self {
        self.accum_precision = precision;
        self
    }

    pub fn with_masked_row_policy(mut self, policy: MaskedRowPolicy) -> Self {
        self.masked_row_policy = policy;
        self
    }

    pub fn with_deterministic(mut self, deterministic: bool) -> Self {
        self.deterministic = deterministic;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.head_dim == 0 {
            return Err(Error::Config(format!(
                "seq_len and head_dim must be at least 1, got {} and {}",
                self.seq_len, self.head_dim
            )));
        }
        if !(self.softmax_scale.is_finite() && self.softmax_scale > 0.0) {
            return Err(Error::Config(format!(
                "softmax_scale must be a positive finite real, got {}",
                self.softmax_scale
            )));
        }
        if self.block.seq_len() != self.seq_len {
            return Err(Error::Config(format!(
                "block spec covers seq_len {} but config has {}",
                self.block.seq_len(),
                self.seq_len
            )));
        }
        if self.block.tr != self.seq_len.div_ceil(self.block.block_rows)
            || self.block.tc != self.seq_len.div_ceil(self.block.block_cols)
        {
            return Err(Error::Config("block counts disagree with seq_len".into()));
        }
        Ok(())
    }

    /// Checks that `m` has this config's `seq_len x head_dim` shape.
    pub fn check_shape(&self, m: &Matrix, name: &str) -> Result<()> {
        if m.rows() != self.seq_len || m.cols() != self.head_dim {
            return Err(Error::Dimension(format!(
                "{name} must be {}x{}, got {}x{}",
                self.seq_len,
                self.head_dim,
                m.rows(),
                m.cols()
            )));
        }
        Ok(())
    }
}
