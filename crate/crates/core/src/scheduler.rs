//! Work scheduling across batch, head, and block dimensions.
//!
//! Forward work units are `(batch, query head, row block)` triples: each
//! owns its output rows exclusively, so any number of workers can execute
//! any interleaving and the assembled result is identical bit for bit.
//! Backward units are `(batch, query head, column block)` triples, which
//! own their key/value gradient blocks exclusively but all contribute to
//! the shared query gradient. Two merge strategies are provided:
//!
//! * [`DqMerge::BufferedReduce`] keeps every unit's contributions and adds
//!   them in canonical unit order after the workers finish. The result is
//!   bitwise identical to the serial pass for any worker count, at the
//!   cost of buffering one contribution block per `(row, column)` block
//!   pair.
//! * [`DqMerge::AtomicAnalog`] adds contributions into shared accumulators
//!   as soon as they are produced, the way a device kernel would issue
//!   atomic adds. Ordering depends on timing, so results are only
//!   reproducible to rounding (single adds commute but do not associate).
//!
//! Work is handed out through a shared index, so a stalled worker never
//! blocks the rest. Units split along the key dimension (several workers
//! cooperating on one output row block) would help very long sequences at
//! small batch sizes, but they need a second statistics-merge reduction;
//! the unit shapes here keep every reduction inside one unit.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use crate::config::{AccumPrecision, AttentionConfig};
use crate::error::{Error, Result};
use crate::flash::{
    apply_dq_contribution, backward_col_block, flash_forward, forward_row_block, rowwise_dot,
    ColBlockOutput, RowBlockOutput,
};
use crate::heads::{BatchedGradients, BatchedTensors, ForwardArtifacts};
use crate::instrument::CostCounters;
use crate::matrix::{Matrix, RowVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnitKind {
    ForwardRowBlock,
    BackwardColBlock,
}

/// One independently executable piece of an attention pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WorkUnit {
    pub kind: UnitKind,
    pub batch: usize,
    pub q_head: usize,
    pub block_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DqMerge {
    /// Deterministic post-pass merge in canonical unit order.
    #[default]
    BufferedReduce,
    /// Immediate compare-and-swap adds into shared accumulators.
    AtomicAnalog,
}

#[derive(Debug, Clone, Copy)]
pub struct SchedulerConfig {
    pub n_workers: usize,
    /// Require bitwise-reproducible results across runs and worker counts.
    pub deterministic: bool,
    pub dq_merge: DqMerge,
}

impl SchedulerConfig {
    pub fn new(n_workers: usize) -> Self {
        SchedulerConfig {
            n_workers,
            deterministic: true,
            dq_merge: DqMerge::BufferedReduce,
        }
    }

    pub fn with_deterministic(mut self, deterministic: bool) -> Self {
        self.deterministic = deterministic;
        self
    }

    pub fn with_dq_merge(mut self, dq_merge: DqMerge) -> Self {
        self.dq_merge = dq_merge;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_workers == 0 {
            return Err(Error::Config("worker count must be positive".into()));
        }
        if self.deterministic && self.dq_merge == DqMerge::AtomicAnalog {
            return Err(Error::Config(
                "atomic gradient merge cannot be deterministic; \
                 use BufferedReduce or drop the determinism requirement"
                    .into(),
            ));
        }
        Ok(())
    }
}

pub fn plan_forward(tensors: &BatchedTensors, cfg: &AttentionConfig) -> Vec<WorkUnit> {
    plan(tensors, cfg.block.tr, UnitKind::ForwardRowBlock)
}

pub fn plan_backward(tensors: &BatchedTensors, cfg: &AttentionConfig) -> Vec<WorkUnit> {
    plan(tensors, cfg.block.tc, UnitKind::BackwardColBlock)
}

fn plan(tensors: &BatchedTensors, blocks: usize, kind: UnitKind) -> Vec<WorkUnit> {
    let mut units =
        Vec::with_capacity(tensors.batch_size * tensors.layout.n_q_heads * blocks);
    for batch in 0..tensors.batch_size {
        for q_head in 0..tensors.layout.n_q_heads {
            for block_index in 0..blocks {
                units.push(WorkUnit {
                    kind,
                    batch,
                    q_head,
                    block_index,
                });
            }
        }
    }
    units
}

/// Runs `worker(unit_index)` for every unit across `n_workers` threads,
/// pulling indices from a shared counter. Returns per-unit results and
/// the merged counters.
fn run_units<T: Send>(
    n_units: usize,
    n_workers: usize,
    worker: impl Fn(usize, &mut CostCounters) -> Result<T> + Sync,
) -> (Vec<Option<Result<T>>>, CostCounters) {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<T>>>> =
        Mutex::new((0..n_units).map(|_| None).collect());
    let totals = Mutex::new(CostCounters::new());

    std::thread::scope(|scope| {
        for _ in 0..n_workers {
            scope.spawn(|| {
                let mut local = CostCounters::new();
                loop {
                    let idx = next.fetch_add(1, Ordering::Relaxed);
                    if idx >= n_units {
                        break;
                    }
                    let out = worker(idx, &mut local);
                    results.lock().unwrap()[idx] = Some(out);
                }
                totals.lock().unwrap().merge(&local);
            });
        }
    });

    (
        results.into_inner().unwrap(),
        totals.into_inner().unwrap(),
    )
}

fn first_error<T>(units: &[WorkUnit], results: &[Option<Result<T>>]) -> Option<Error> {
    for (unit, result) in units.iter().zip(results) {
        match result {
            None => {
                return Some(Error::Execution(format!(
                    "unit (batch {}, head {}, block {}) was never executed",
                    unit.batch, unit.q_head, unit.block_index
                )))
            }
            Some(Err(e)) => {
                return Some(Error::Execution(format!(
                    "unit (batch {}, head {}, block {}) failed: {e}",
                    unit.batch, unit.q_head, unit.block_index
                )))
            }
            Some(Ok(_)) => {}
        }
    }
    None
}

/// Executes the forward pass over all `(batch, head)` pairs with the given
/// worker count. Output is assembled per unit index, so it is bitwise
/// identical for any worker count and any execution interleaving.
pub fn run_forward_parallel(
    tensors: &BatchedTensors,
    cfg: &AttentionConfig,
    sched: &SchedulerConfig,
) -> Result<(ForwardArtifacts, CostCounters)> {
    sched.validate()?;
    cfg.validate()?;
    let units = plan_forward(tensors, cfg);
    run_forward_units(&units, tensors, cfg, sched)
}

pub(crate) fn run_forward_units(
    units: &[WorkUnit],
    tensors: &BatchedTensors,
    cfg: &AttentionConfig,
    sched: &SchedulerConfig,
) -> Result<(ForwardArtifacts, CostCounters)> {
    let (mut results, counters) = run_units(units.len(), sched.n_workers, |idx, local| {
        let unit = &units[idx];
        forward_row_block(
            unit.block_index,
            tensors.q(unit.batch, unit.q_head)?,
            tensors.k_for(unit.batch, unit.q_head)?,
            tensors.v_for(unit.batch, unit.q_head)?,
            cfg,
            local,
        )
    });
    if let Some(err) = first_error(units, &results) {
        return Err(err);
    }

    let n_slots = tensors.batch_size * tensors.layout.n_q_heads;
    let mut outputs: Vec<Matrix> = (0..n_slots)
        .map(|_| Matrix::zeros(cfg.seq_len, cfg.head_dim))
        .collect();
    let mut logsumexps: Vec<RowVector> =
        (0..n_slots).map(|_| RowVector::zeros(cfg.seq_len)).collect();

    for (unit, result) in units.iter().zip(results.iter_mut()) {
        let rb: RowBlockOutput = match result.take() {
            Some(Ok(rb)) => rb,
            _ => unreachable!("errors were drained above"),
        };
        let slot = unit.batch * tensors.layout.n_q_heads + unit.q_head;
        let rows = cfg.block.row_range(unit.block_index)?;
        outputs[slot]
            .view_mut(rows.start, rows.len(), 0, cfg.head_dim)?
            .copy_from(&rb.output)?;
        logsumexps[slot].as_mut_slice()[rows.clone()]
            .copy_from_slice(rb.logsumexp.as_slice());
    }
    Ok((
        ForwardArtifacts {
            outputs,
            logsumexps,
        },
        counters,
    ))
}

struct AtomicGrid {
    cells: Vec<AtomicU64>,
    rows: usize,
    cols: usize,
}

impl AtomicGrid {
    fn zeros(rows: usize, cols: usize) -> Self {
        AtomicGrid {
            cells: (0..rows * cols)
                .map(|_| AtomicU64::new(0.0f64.to_bits()))
                .collect(),
            rows,
            cols,
        }
    }

    fn add(&self, row: usize, col: usize, x: f64) {
        let cell = &self.cells[row * self.cols + col];
        let mut current = cell.load(Ordering::Relaxed);
        loop {
            let updated = (f64::from_bits(current) + x).to_bits();
            match cell.compare_exchange_weak(
                current,
                updated,
                Ordering::Relaxed,
                Ordering::Relaxed,
            ) {
                Ok(_) => break,
                Err(seen) => current = seen,
            }
        }
    }

    fn into_matrix(self) -> Matrix {
        let data = self
            .cells
            .into_iter()
            .map(|c| f64::from_bits(c.into_inner()))
            .collect();
        Matrix::from_vec(self.rows, self.cols, data).expect("grid dimensions are consistent")
    }
}

/// Executes the backward pass over all `(batch, head)` pairs with the
/// given worker count.
///
/// Key/value gradients are owned per unit and assembled by index. Query
/// gradients follow the configured [`DqMerge`]: buffered reduction merges
/// contributions in canonical `(batch, head, column block)` order and is
/// bitwise identical to [`crate::heads::multihead_backward`]; atomic
/// merging is reproducible only to rounding.
pub fn run_backward_parallel(
    tensors: &BatchedTensors,
    artifacts: &ForwardArtifacts,
    d_outputs: &[Matrix],
    cfg: &AttentionConfig,
    sched: &SchedulerConfig,
) -> Result<(BatchedGradients, CostCounters)> {
    sched.validate()?;
    cfg.validate()?;
    let n_slots = tensors.batch_size * tensors.layout.n_q_heads;
    if artifacts.outputs.len() != n_slots
        || artifacts.logsumexps.len() != n_slots
        || d_outputs.len() != n_slots
    {
        return Err(Error::Contract(format!(
            "expected {n_slots} output, logsumexp, and upstream-gradient slots, got {}, {}, {}",
            artifacts.outputs.len(),
            artifacts.logsumexps.len(),
            d_outputs.len()
        )));
    }
    let reduced = cfg.accum_precision == AccumPrecision::Reduced;

    let mut counters = CostCounters::new();
    let corrections: Vec<RowVector> = artifacts
        .outputs
        .iter()
        .zip(d_outputs)
        .map(|(o, g)| rowwise_dot(o, g, &mut counters))
        .collect::<Result<_>>()?;
    counters.write_interface(n_slots as u64 * (cfg.seq_len * cfg.head_dim) as u64);

    let units = plan_backward(tensors, cfg);
    let atomic_dq: Option<Vec<AtomicGrid>> = match sched.dq_merge {
        DqMerge::AtomicAnalog => Some(
            (0..n_slots)
                .map(|_| AtomicGrid::zeros(cfg.seq_len, cfg.head_dim))
                .collect(),
        ),
        DqMerge::BufferedReduce => None,
    };

    let (mut results, unit_counters) =
        run_units(units.len(), sched.n_workers, |idx, local| {
            let unit = &units[idx];
            let slot = unit.batch * tensors.layout.n_q_heads + unit.q_head;
            let mut out = backward_col_block(
                unit.block_index,
                tensors.q(unit.batch, unit.q_head)?,
                tensors.k_for(unit.batch, unit.q_head)?,
                tensors.v_for(unit.batch, unit.q_head)?,
                &d_outputs[slot],
                &artifacts.logsumexps[slot],
                &corrections[slot],
                cfg,
                local,
            )?;
            if let Some(grids) = &atomic_dq {
                for (row_block, contribution) in out.dq_contributions.drain(..) {
                    let rows = cfg.block.row_range(row_block)?;
                    let elems = contribution.element_count() as u64;
                    local.load_to_block(elems);
                    for r in 0..contribution.rows() {
                        for c in 0..contribution.cols() {
                            grids[slot].add(rows.start + r, c, contribution.get(r, c));
                        }
                    }
                    local.nonmatmul_flops += elems;
                    local.store_from_block(elems);
                }
            }
            Ok(out)
        });
    counters.merge(&unit_counters);
    if let Some(err) = first_error(&units, &results) {
        return Err(err);
    }

    let kv_slots = tensors.batch_size * tensors.layout.n_kv_heads;
    let mut dk: Vec<Matrix> = (0..kv_slots)
        .map(|_| Matrix::zeros(cfg.seq_len, cfg.head_dim))
        .collect();
    let mut dv = dk.clone();
    let mut dq: Vec<Matrix> = (0..n_slots)
        .map(|_| Matrix::zeros(cfg.seq_len, cfg.head_dim))
        .collect();

    // Canonical merge order, independent of how the unit list happened to
    // be arranged or scheduled.
    let mut order: Vec<usize> = (0..units.len()).collect();
    order.sort_by_key(|&i| (units[i].batch, units[i].q_head, units[i].block_index));

    for idx in order {
        let unit = &units[idx];
        let slot = unit.batch * tensors.layout.n_q_heads + unit.q_head;
        let kv_slot = unit.batch * tensors.layout.n_kv_heads
            + tensors.layout.kv_head_index(unit.q_head)?;
        let cb: ColBlockOutput = match results[idx].take() {
            Some(Ok(cb)) => cb,
            _ => unreachable!("errors were drained above"),
        };
        let cols = cfg.block.col_range(unit.block_index)?;
        dk[kv_slot]
            .view_mut(cols.start, cols.len(), 0, cfg.head_dim)?
            .add_assign_from(&cb.dk)?;
        dv[kv_slot]
            .view_mut(cols.start, cols.len(), 0, cfg.head_dim)?
            .add_assign_from(&cb.dv)?;
        for (row_block, contribution) in &cb.dq_contributions {
            let rows = cfg.block.row_range(*row_block)?;
            apply_dq_contribution(
                &mut dq[slot],
                rows.start,
                contribution,
                reduced,
                &mut counters,
            )?;
        }
    }

    if let Some(grids) = atomic_dq {
        dq = grids.into_iter().map(AtomicGrid::into_matrix).collect();
    }

    Ok((BatchedGradients { dq, dk, dv }, counters))
}

/// One autotuning measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct TuneRecord {
    pub block_rows: usize,
    pub block_cols: usize,
    pub footprint_bytes: u64,
    /// Median wall time over the probe runs; `None` for rejected shapes.
    pub runtime_s: Option<f64>,
    pub runs: usize,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AutotuneOutcome {
    pub best: (usize, usize),
    pub records: Vec<TuneRecord>,
}

/// Block-local working set of the forward kernel for one `(Br, Bc)` shape:
/// the score block, the query block, key and value blocks, and four
/// per-row vectors (running max, running sum, rescale factor, logsumexp).
pub fn block_footprint_bytes(
    block_rows: usize,
    block_cols: usize,
    head_dim: usize,
    element_size: u64,
) -> u64 {
    let elems = block_rows * block_cols
        + block_rows * head_dim
        + 2 * block_cols * head_dim
        + 4 * block_rows;
    elems as u64 * element_size
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("timings are finite"));
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2.0
    }
}

/// Times the forward pass for each candidate block shape that fits the
/// given scratch capacity and returns the fastest.
///
/// `budget` is the number of timed runs per surviving candidate, reduced
/// to a single probe when only one candidate survives the capacity
/// filter. Every candidate's footprint and timing is recorded so callers
/// can report why a shape was chosen or rejected.
#[allow(clippy::too_many_arguments)]
pub fn autotune_block_sizes(
    candidates: &[(usize, usize)],
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    budget: usize,
    sram_capacity_bytes: u64,
    element_size: u64,
) -> Result<AutotuneOutcome> {
    if candidates.is_empty() {
        return Err(Error::Config("no candidate block shapes".into()));
    }
    if budget == 0 {
        return Err(Error::Config("autotune budget must be positive".into()));
    }
    let surviving = candidates
        .iter()
        .filter(|(br, bc)| {
            block_footprint_bytes(*br, *bc, cfg.head_dim, element_size) <= sram_capacity_bytes
        })
        .count();
    if surviving == 0 {
        return Err(Error::Capacity {
            capacity_bytes: sram_capacity_bytes,
        });
    }
    let runs = if surviving == 1 { 1 } else { budget };

    let mut records = Vec::with_capacity(candidates.len());
    let mut best: Option<((usize, usize), f64)> = None;
    for &(br, bc) in candidates {
        let footprint = block_footprint_bytes(br, bc, cfg.head_dim, element_size);
        if footprint > sram_capacity_bytes {
            records.push(TuneRecord {
                block_rows: br,
                block_cols: bc,
                footprint_bytes: footprint,
                runtime_s: None,
                runs: 0,
                rejected: true,
            });
            continue;
        }
        let tuned = (*cfg).with_block_sizes(br, bc)?;
        let mut samples = Vec::with_capacity(runs);
        for _ in 0..runs {
            let mut scratch = CostCounters::new();
            let start = Instant::now();
            flash_forward(q, k, v, &tuned, &mut scratch)?;
            samples.push(start.elapsed().as_secs_f64());
        }
        let runtime = median(&mut samples);
        records.push(TuneRecord {
            block_rows: br,
            block_cols: bc,
            footprint_bytes: footprint,
            runtime_s: Some(runtime),
            runs,
            rejected: false,
        });
        if best.is_none_or(|(_, t)| runtime < t) {
            best = Some(((br, bc), runtime));
        }
    }
    Ok(AutotuneOutcome {
        best: best.expect("at least one candidate survived").0,
        records,
    })
}
