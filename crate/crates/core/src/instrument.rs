//! Cost accounting: FLOP counters split by unit type, element-movement
//! counters for the two-level memory analog, and an analytic roofline model.
//!
//! The kernels in this crate run on a CPU, so "HBM" and "SRAM" are analogs:
//! HBM-analog traffic is every element moved across a kernel interface
//! (the full `Q`/`K`/`V`/`O` arrays and per-row statistics), SRAM-analog
//! traffic is movement into and out of block-local buffers. Counters are
//! incremented where the movement is modeled, not inside arithmetic
//! helpers, so a counter total maps one-to-one onto the load/store
//! structure of the tiled algorithm.
//!
//! FLOP conventions: a matrix product of shape (m x k) by (k x n) counts
//! 2*m*n*k matmul FLOPs. One exponential, one logarithm, one division, one
//! max, one add, or one multiply outside a matrix product counts as one
//! non-matmul FLOP.

use crate::error::{Error, Result};

/// Running totals for one kernel invocation (or a merged set of them).
///
/// Read/write counters are element counts; [`CostCounters::snapshot`]
/// converts them to bytes using a [`CostModel`] element size.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct CostCounters {
    pub matmul_flops: u64,
    pub nonmatmul_flops: u64,
    pub hbm_reads: u64,
    pub hbm_writes: u64,
    pub sram_reads: u64,
    pub sram_writes: u64,
    pub blocks_computed: u64,
    pub blocks_skipped: u64,
}

/// Column order used by every serialized counter record.
pub const COUNTER_KEYS: [&str; 8] = [
    "matmul_flops",
    "nonmatmul_flops",
    "hbm_read_bytes",
    "hbm_write_bytes",
    "sram_read_bytes",
    "sram_write_bytes",
    "blocks_computed",
    "blocks_skipped",
];

impl CostCounters {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds another counter set into this one. Counts are exact integers,
    /// so merging per-worker counters reproduces a serial run's totals.
    pub fn merge(&mut self, other: &CostCounters) {
        self.matmul_flops += other.matmul_flops;
        self.nonmatmul_flops += other.nonmatmul_flops;
        self.hbm_reads += other.hbm_reads;
        self.hbm_writes += other.hbm_writes;
        self.sram_reads += other.sram_reads;
        self.sram_writes += other.sram_writes;
        self.blocks_computed += other.blocks_computed;
        self.blocks_skipped += other.blocks_skipped;
    }

    pub fn total_flops(&self) -> u64 {
        self.matmul_flops + self.nonmatmul_flops
    }

    pub fn hbm_elements(&self) -> u64 {
        self.hbm_reads + self.hbm_writes
    }

    /// Interface array -> block-local buffer.
    pub(crate) fn load_to_block(&mut self, elems: u64) {
        self.hbm_reads += elems;
        self.sram_writes += elems;
    }

    /// Block-local buffer -> interface array.
    pub(crate) fn store_from_block(&mut self, elems: u64) {
        self.sram_reads += elems;
        self.hbm_writes += elems;
    }

    /// Interface read with no block-local stop (reference path streams
    /// whole arrays).
    pub(crate) fn read_interface(&mut self, elems: u64) {
        self.hbm_reads += elems;
    }

    /// Interface write with no block-local stop.
    pub(crate) fn write_interface(&mut self, elems: u64) {
        self.hbm_writes += elems;
    }

    /// Movement between block-local buffers during on-chip compute.
    pub(crate) fn block_compute(&mut self, reads: u64, writes: u64) {
        self.sram_reads += reads;
        self.sram_writes += writes;
    }

    /// Flat key-value record in [`COUNTER_KEYS`] order. Element counts are
    /// converted to bytes with `element_size`.
    pub fn snapshot(&self, element_size: u64) -> [(&'static str, u64); 8] {
        [
            ("matmul_flops", self.matmul_flops),
            ("nonmatmul_flops", self.nonmatmul_flops),
            ("hbm_read_bytes", self.hbm_reads * element_size),
            ("hbm_write_bytes", self.hbm_writes * element_size),
            ("sram_read_bytes", self.sram_reads * element_size),
            ("sram_write_bytes", self.sram_writes * element_size),
            ("blocks_computed", self.blocks_computed),
            ("blocks_skipped", self.blocks_skipped),
        ]
    }
}

/// Throughput and bandwidth constants for the roofline model.
///
/// Defaults describe one A100-class accelerator: 312e12 FLOPs/s for matrix
/// products against 19.5e12 FLOPs/s for everything else (a 16x gap), 2.0e12
/// B/s of main-memory bandwidth, 19e12 B/s of on-chip bandwidth, and
/// 2-byte elements.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostModel {
    pub matmul_flops_per_s: f64,
    pub nonmatmul_flops_per_s: f64,
    pub hbm_bytes_per_s: f64,
    pub sram_bytes_per_s: f64,
    pub element_size: u64,
}

impl Default for CostModel {
    fn default() -> Self {
        CostModel {
            matmul_flops_per_s: 312e12,
            nonmatmul_flops_per_s: 19.5e12,
            hbm_bytes_per_s: 2.0e12,
            sram_bytes_per_s: 19e12,
            element_size: 2,
        }
    }
}

/// Which roofline term dominated a [`predict_runtime`] estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RooflineBound {
    Compute,
    Memory,
}

/// Analytic model FLOPs for one forward pass over all heads:
/// `4 * seq_len^2 * head_dim * n_heads`, halved when causal masking skips
/// half the score matrix.
pub fn flops_forward_model(
    seq_len: usize,
    head_dim: usize,
    n_heads: usize,
    causal: bool,
) -> Result<u64> {
    if seq_len == 0 || head_dim == 0 || n_heads == 0 {
        return Err(Error::Domain(format!(
            "flops_forward_model requires positive sizes, got seq_len={seq_len} \
             head_dim={head_dim} n_heads={n_heads}"
        )));
    }
    let n = seq_len as u64;
    let full = 4 * n * n * head_dim as u64 * n_heads as u64;
    Ok(if causal { full / 2 } else { full })
}

/// Backward-pass model FLOPs: 2.5x the forward count (5 matrix products in
/// the backward against 2 in the forward, recomputation included), rounded
/// to the nearest integer.
pub fn flops_backward_model(forward_flops: u64) -> u64 {
    (5 * forward_flops).div_ceil(2)
}

/// Roofline runtime estimate: the larger of the compute term
/// (`matmul/matmul_tput + nonmatmul/nonmatmul_tput`) and the main-memory
/// term (`hbm_bytes / hbm_bw`), plus which term dominated.
pub fn predict_runtime(counters: &CostCounters, model: &CostModel) -> (f64, RooflineBound) {
    let compute = counters.matmul_flops as f64 / model.matmul_flops_per_s
        + counters.nonmatmul_flops as f64 / model.nonmatmul_flops_per_s;
    let memory = counters.hbm_elements() as f64 * model.element_size as f64
        / model.hbm_bytes_per_s;
    if compute >= memory {
        (compute, RooflineBound::Compute)
    } else {
        (memory, RooflineBound::Memory)
    }
}

/// Fraction of runtime-weighted work done at matmul throughput:
/// `matmul / (matmul + 16 * nonmatmul)`.
///
/// The factor 16 is the throughput gap between the two unit types, so the
/// ratio measures how well a kernel keeps its work on the fast units. The
/// counters carry no precision information; at a desk scale all counted
/// operations are assumed to run at their unit's nominal rate.
pub fn effective_flops_ratio(counters: &CostCounters) -> Result<f64> {
    if counters.total_flops() == 0 {
        return Err(Error::Domain(
            "effective_flops_ratio requires a nonzero FLOP total".into(),
        ));
    }
    let mm = counters.matmul_flops as f64;
    Ok(mm / (mm + 16.0 * counters.nonmatmul_flops as f64))
}
