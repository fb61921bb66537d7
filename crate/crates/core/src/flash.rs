//! Tiled exact attention.
//!
//! The forward pass streams the key/value sequence through block-local
//! buffers, maintaining per-row running maxima and running exponential sums
//! so the softmax normalizer never requires a second pass. The accumulated
//! output is kept unnormalized and rescaled only when a new maximum
//! appears; one division per row at the very end produces the final output.
//! The full `seq_len x seq_len` score matrix is never materialized, and the
//! only per-row statistic kept for the backward pass is the logsumexp of
//! the scaled scores.
//!
//! The backward pass recomputes score blocks from that logsumexp, walking
//! column blocks in the outer loop so each key/value gradient block is
//! accumulated privately; query-gradient blocks are updated by
//! read-modify-write against the interface array.
//!
//! Causal masking is applied per block: blocks entirely above the diagonal
//! are skipped without touching memory, blocks entirely below it run
//! unmasked, and blocks straddling it mask individual scores with `-inf`.

use crate::config::{AccumPrecision, AttentionConfig, BlockSpec, MaskedRowPolicy};
use crate::error::{Error, Result};
use crate::instrument::CostCounters;
use crate::matrix::{matmul, matmul_at, Matrix, RowVector};

/// Running per-row softmax statistics: the maximum seen so far and the
/// exponential sum rescaled to that maximum. A fresh accumulator starts at
/// `-inf` and `0`, the identity for both reductions.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxStats {
    pub row_max: RowVector,
    pub row_sum: RowVector,
}

impl SoftmaxStats {
    pub fn fresh(rows: usize) -> Self {
        SoftmaxStats {
            row_max: RowVector::filled(rows, f64::NEG_INFINITY),
            row_sum: RowVector::zeros(rows),
        }
    }

    pub fn rows(&self) -> usize {
        self.row_max.len()
    }
}

/// Output of the tiled forward pass: the attention output and one
/// logsumexp per row, the only statistic the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct FlashForwardResult {
    pub output: Matrix,
    pub logsumexp: RowVector,
}

/// How a score block relates to the causal diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CausalBlockClass {
    /// Entirely above the diagonal: produces no probability mass.
    Skip,
    /// Straddles the diagonal: computed, then masked per element.
    PartialMask,
    /// Entirely at or below the diagonal: computed unmasked.
    FullCompute,
}

/// Classifies block `(row_block, col_block)` against the causal diagonal
/// using global element extents, so ragged final blocks classify correctly.
pub fn causal_block_classification(
    row_block: usize,
    col_block: usize,
    spec: &BlockSpec,
) -> Result<CausalBlockClass> {
    let rows = spec.row_range(row_block)?;
    let cols = spec.col_range(col_block)?;
    let max_row = rows.end - 1;
    let min_row = rows.start;
    let max_col = cols.end - 1;
    let min_col = cols.start;
    if min_col > max_row {
        Ok(CausalBlockClass::Skip)
    } else if max_col <= min_row {
        Ok(CausalBlockClass::FullCompute)
    } else {
        Ok(CausalBlockClass::PartialMask)
    }
}

fn round_matrix_to_f32(m: &mut Matrix) {
    for r in 0..m.rows() {
        for x in m.row_mut(r) {
            *x = *x as f32 as f64;
        }
    }
}

fn round_rowvector_to_f32(v: &mut RowVector) {
    for x in v.as_mut_slice() {
        *x = *x as f32 as f64;
    }
}

/// Absorbs one score block into the running statistics and the
/// unnormalized output accumulator.
///
/// With `m' = max(m, rowmax(S))` the block's probabilities are
/// `exp(S - m')`; the previous sum and output are rescaled by
/// `exp(m - m')` and the block's contribution `P~ V` is added on top. No
/// division happens here; normalization is deferred to
/// [`finalize_output`].
///
/// Rows whose maximum is still `-inf` after this block (every score masked
/// so far) keep a zero sum and zero output, rather than propagating the
/// NaN that `exp(-inf - -inf)` would produce.
pub fn online_softmax_step(
    stats: &SoftmaxStats,
    o_accum: &Matrix,
    s_block: &Matrix,
    v_block: &Matrix,
    counters: &mut CostCounters,
) -> Result<(SoftmaxStats, Matrix)> {
    let rows = s_block.rows();
    let cols = s_block.cols();
    if stats.rows() != rows {
        return Err(Error::Dimension(format!(
            "stats track {} rows but score block has {rows}",
            stats.rows()
        )));
    }
    if v_block.rows() != cols {
        return Err(Error::Dimension(format!(
            "value block has {} rows but score block has {cols} columns",
            v_block.rows()
        )));
    }
    let d = v_block.cols();
    if o_accum.rows() != rows || o_accum.cols() != d {
        return Err(Error::Dimension(format!(
            "output accumulator must be {rows}x{d}, got {}x{}",
            o_accum.rows(),
            o_accum.cols()
        )));
    }
    let (ru, cu, du) = (rows as u64, cols as u64, d as u64);

    let mut new_max = RowVector::zeros(rows);
    for r in 0..rows {
        let block_max = s_block
            .row(r)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max);
        new_max.set(r, stats.row_max.get(r).max(block_max));
    }
    counters.nonmatmul_flops += ru * cu + ru;

    let mut probs = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let m = new_max.get(r);
        if m == f64::NEG_INFINITY {
            continue;
        }
        let src = s_block.row(r);
        for (p, &s) in probs.row_mut(r).iter_mut().zip(src) {
            *p = (s - m).exp();
        }
    }
    counters.nonmatmul_flops += 2 * ru * cu;
    counters.block_compute(ru * cu, ru * cu);

    let mut new_sum = RowVector::zeros(rows);
    let mut rescale = RowVector::zeros(rows);
    for r in 0..rows {
        let m_new = new_max.get(r);
        let alpha = if m_new == f64::NEG_INFINITY {
            1.0
        } else {
            (stats.row_max.get(r) - m_new).exp()
        };
        let block_sum: f64 = probs.row(r).iter().sum();
        new_sum.set(r, alpha * stats.row_sum.get(r) + block_sum);
        rescale.set(r, alpha);
    }
    counters.nonmatmul_flops += ru * (cu + 4);

    let contribution = matmul(&probs, v_block, false, counters)?;
    counters.block_compute(ru * cu + cu * du, ru * du);

    let mut o_new = Matrix::zeros(rows, d);
    for r in 0..rows {
        let alpha = rescale.get(r);
        let old = o_accum.row(r);
        let add = contribution.row(r);
        for (j, out) in o_new.row_mut(r).iter_mut().enumerate() {
            *out = alpha * old[j] + add[j];
        }
    }
    counters.nonmatmul_flops += 2 * ru * du;
    counters.block_compute(2 * ru * du, ru * du);

    Ok((
        SoftmaxStats {
            row_max: new_max,
            row_sum: new_sum,
        },
        o_new,
    ))
}

/// Divides the accumulated output by the final exponential sums and forms
/// the per-row logsumexp `L = m + ln(sum)`.
///
/// A zero sum means the row never saw an unmasked score; the configured
/// policy decides between an error and a zero row with `L = -inf`.
pub fn finalize_output(
    o_accum: &Matrix,
    stats: &SoftmaxStats,
    policy: MaskedRowPolicy,
    counters: &mut CostCounters,
) -> Result<(Matrix, RowVector)> {
    let rows = o_accum.rows();
    let d = o_accum.cols();
    if stats.rows() != rows {
        return Err(Error::Dimension(format!(
            "stats track {} rows but accumulator has {rows}",
            stats.rows()
        )));
    }
    let mut output = Matrix::zeros(rows, d);
    let mut logsumexp = RowVector::zeros(rows);
    for r in 0..rows {
        let sum = stats.row_sum.get(r);
        if sum == 0.0 {
            match policy {
                MaskedRowPolicy::Error => return Err(Error::FullyMaskedRow { row: r }),
                MaskedRowPolicy::ZeroOutput => {
                    logsumexp.set(r, f64::NEG_INFINITY);
                    continue;
                }
            }
        }
        let src = o_accum.row(r);
        for (out, &x) in output.row_mut(r).iter_mut().zip(src) {
            *out = x / sum;
        }
        logsumexp.set(r, stats.row_max.get(r) + sum.ln());
    }
    counters.nonmatmul_flops += (rows * d) as u64 + 2 * rows as u64;
    counters.block_compute((rows * d) as u64, (rows * d + rows) as u64);
    Ok((output, logsumexp))
}

fn validate_forward_inputs(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
) -> Result<()> {
    cfg.validate()?;
    cfg.check_shape(q, "Q")?;
    cfg.check_shape(k, "K")?;
    cfg.check_shape(v, "V")
}

pub(crate) struct RowBlockOutput {
    pub output: Matrix,
    pub logsumexp: RowVector,
    pub stats: SoftmaxStats,
}

/// Computes one output row block: stream every key/value column block
/// against the given query rows. This is the forward work unit the
/// scheduler distributes.
pub(crate) fn forward_row_block(
    row_block: usize,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<RowBlockOutput> {
    let d = cfg.head_dim;
    let rows = cfg.block.row_range(row_block)?;
    let r_len = rows.len();
    let reduced = cfg.accum_precision == AccumPrecision::Reduced;

    let q_block = q.block(rows.start, r_len, 0, d)?;
    counters.load_to_block((r_len * d) as u64);

    let mut stats = SoftmaxStats::fresh(r_len);
    let mut o_accum = Matrix::zeros(r_len, d);

    for col_block in 0..cfg.block.tc {
        if cfg.causal {
            match causal_block_classification(row_block, col_block, &cfg.block)? {
                CausalBlockClass::Skip => {
                    counters.blocks_skipped += 1;
                    continue;
                }
                CausalBlockClass::FullCompute => {}
                CausalBlockClass::PartialMask => {}
            }
        }
        let cols = cfg.block.col_range(col_block)?;
        let c_len = cols.len();
        let k_block = k.block(cols.start, c_len, 0, d)?;
        let v_block = v.block(cols.start, c_len, 0, d)?;
        counters.load_to_block(2 * (c_len * d) as u64);

        let mut s_block = matmul(&q_block, &k_block, true, counters)?;
        counters.block_compute(((r_len + c_len) * d) as u64, (r_len * c_len) as u64);
        for r in 0..r_len {
            for s in s_block.row_mut(r) {
                *s *= cfg.softmax_scale;
            }
        }
        counters.nonmatmul_flops += (r_len * c_len) as u64;

        if cfg.causal
            && causal_block_classification(row_block, col_block, &cfg.block)?
                == CausalBlockClass::PartialMask
        {
            for r in 0..r_len {
                let global_row = rows.start + r;
                for (c, s) in s_block.row_mut(r).iter_mut().enumerate() {
                    if cols.start + c > global_row {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
        }

        let (next_stats, next_o) =
            online_softmax_step(&stats, &o_accum, &s_block, &v_block, counters)?;
        stats = next_stats;
        o_accum = next_o;
        if reduced {
            round_matrix_to_f32(&mut o_accum);
            round_rowvector_to_f32(&mut stats.row_max);
            round_rowvector_to_f32(&mut stats.row_sum);
        }
        counters.blocks_computed += 1;
    }

    let (mut output, mut logsumexp) =
        finalize_output(&o_accum, &stats, cfg.masked_row_policy, counters)?;
    if reduced {
        round_matrix_to_f32(&mut output);
        round_rowvector_to_f32(&mut logsumexp);
    }
    counters.store_from_block((r_len * d + r_len) as u64);

    Ok(RowBlockOutput {
        output,
        logsumexp,
        stats,
    })
}

/// Tiled forward pass writing into caller-provided buffers.
///
/// Peak transient allocation is a handful of block-sized buffers,
/// independent of `seq_len`; callers that preallocate `out_o` and `out_l`
/// can hold the whole pass to that bound.
pub fn flash_forward_into(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
    out_o: &mut Matrix,
    out_l: &mut RowVector,
) -> Result<()> {
    validate_forward_inputs(q, k, v, cfg)?;
    if out_o.rows() != cfg.seq_len || out_o.cols() != cfg.head_dim {
        return Err(Error::Dimension(format!(
            "output buffer must be {}x{}, got {}x{}",
            cfg.seq_len,
            cfg.head_dim,
            out_o.rows(),
            out_o.cols()
        )));
    }
    if out_l.len() != cfg.seq_len {
        return Err(Error::Dimension(format!(
            "logsumexp buffer must have length {}, got {}",
            cfg.seq_len,
            out_l.len()
        )));
    }
    for row_block in 0..cfg.block.tr {
        let rows = cfg.block.row_range(row_block)?;
        let rb = forward_row_block(row_block, q, k, v, cfg, counters)?;
        out_o
            .view_mut(rows.start, rows.len(), 0, cfg.head_dim)?
            .copy_from(&rb.output)?;
        out_l.as_mut_slice()[rows.clone()].copy_from_slice(rb.logsumexp.as_slice());
    }
    Ok(())
}

/// Tiled forward pass. See the module docs for the algorithm.
pub fn flash_forward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<FlashForwardResult> {
    let mut output = Matrix::zeros(cfg.seq_len, cfg.head_dim);
    let mut logsumexp = RowVector::zeros(cfg.seq_len);
    flash_forward_into(q, k, v, cfg, counters, &mut output, &mut logsumexp)?;
    Ok(FlashForwardResult { output, logsumexp })
}

/// Forward pass that also returns the final per-row running statistics.
/// `logsumexp` is always derivable from them (`L = m + ln(sum)`); exposing
/// both lets callers verify that the single stored statistic is
/// sufficient.
pub fn flash_forward_with_stats(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<(FlashForwardResult, SoftmaxStats)> {
    validate_forward_inputs(q, k, v, cfg)?;
    let mut output = Matrix::zeros(cfg.seq_len, cfg.head_dim);
    let mut logsumexp = RowVector::zeros(cfg.seq_len);
    let mut stats = SoftmaxStats::fresh(cfg.seq_len);
    for row_block in 0..cfg.block.tr {
        let rows = cfg.block.row_range(row_block)?;
        let rb = forward_row_block(row_block, q, k, v, cfg, counters)?;
        output
            .view_mut(rows.start, rows.len(), 0, cfg.head_dim)?
            .copy_from(&rb.output)?;
        logsumexp.as_mut_slice()[rows.clone()].copy_from_slice(rb.logsumexp.as_slice());
        stats.row_max.as_mut_slice()[rows.clone()].copy_from_slice(rb.stats.row_max.as_slice());
        stats.row_sum.as_mut_slice()[rows.clone()].copy_from_slice(rb.stats.row_sum.as_slice());
    }
    Ok((FlashForwardResult { output, logsumexp }, stats))
}

/// Forward variant that renormalizes the running output by the running sum
/// at every step instead of deferring the division to the end.
///
/// Numerically equivalent, but it spends an extra division per output
/// element per column block; it exists so counter comparisons can show how
/// much non-matmul work the deferred rescaling removes.
pub fn flash_forward_eager_rescale(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<FlashForwardResult> {
    validate_forward_inputs(q, k, v, cfg)?;
    let d = cfg.head_dim;
    let mut output = Matrix::zeros(cfg.seq_len, d);
    let mut logsumexp = RowVector::zeros(cfg.seq_len);

    for row_block in 0..cfg.block.tr {
        let rows = cfg.block.row_range(row_block)?;
        let r_len = rows.len();
        let q_block = q.block(rows.start, r_len, 0, d)?;
        counters.load_to_block((r_len * d) as u64);

        let mut row_max = RowVector::filled(r_len, f64::NEG_INFINITY);
        let mut row_sum = RowVector::zeros(r_len);
        let mut o_block = Matrix::zeros(r_len, d);

        for col_block in 0..cfg.block.tc {
            let class = if cfg.causal {
                causal_block_classification(row_block, col_block, &cfg.block)?
            } else {
                CausalBlockClass::FullCompute
            };
            if class == CausalBlockClass::Skip {
                counters.blocks_skipped += 1;
                continue;
            }
            let cols = cfg.block.col_range(col_block)?;
            let c_len = cols.len();
            let k_block = k.block(cols.start, c_len, 0, d)?;
            let v_block = v.block(cols.start, c_len, 0, d)?;
            counters.load_to_block(2 * (c_len * d) as u64);

            let mut s_block = matmul(&q_block, &k_block, true, counters)?;
            for r in 0..r_len {
                let global_row = rows.start + r;
                for (c, s) in s_block.row_mut(r).iter_mut().enumerate() {
                    *s *= cfg.softmax_scale;
                    if class == CausalBlockClass::PartialMask && cols.start + c > global_row {
                        *s = f64::NEG_INFINITY;
                    }
                }
            }
            counters.nonmatmul_flops += (r_len * c_len) as u64;

            let mut probs = Matrix::zeros(r_len, c_len);
            let mut gamma = RowVector::zeros(r_len);
            for r in 0..r_len {
                let block_max = s_block
                    .row(r)
                    .iter()
                    .copied()
                    .fold(f64::NEG_INFINITY, f64::max);
                let m_new = row_max.get(r).max(block_max);
                let alpha = if m_new == f64::NEG_INFINITY {
                    1.0
                } else {
                    (row_max.get(r) - m_new).exp()
                };
                let mut block_sum = 0.0;
                if m_new != f64::NEG_INFINITY {
                    for (p, &s) in probs.row_mut(r).iter_mut().zip(s_block.row(r)) {
                        *p = (s - m_new).exp();
                        block_sum += *p;
                    }
                }
                gamma.set(r, row_sum.get(r) * alpha);
                row_sum.set(r, gamma.get(r) + block_sum);
                row_max.set(r, m_new);
            }
            counters.nonmatmul_flops += 4 * (r_len * c_len) as u64 + 5 * r_len as u64;
            counters.block_compute((r_len * c_len) as u64, (r_len * c_len) as u64);

            let contribution = matmul(&probs, &v_block, false, counters)?;
            counters.block_compute((r_len * c_len + c_len * d) as u64, (r_len * d) as u64);
            for r in 0..r_len {
                let sum = row_sum.get(r);
                let g = gamma.get(r);
                if sum == 0.0 {
                    continue;
                }
                let add = contribution.row(r);
                for (j, out) in o_block.row_mut(r).iter_mut().enumerate() {
                    *out = (g * *out + add[j]) / sum;
                }
            }
            counters.nonmatmul_flops += 3 * (r_len * d) as u64;
            counters.block_compute(2 * (r_len * d) as u64, (r_len * d) as u64);
            counters.blocks_computed += 1;
        }

        let mut l_block = RowVector::zeros(r_len);
        for r in 0..r_len {
            let sum = row_sum.get(r);
            if sum == 0.0 {
                match cfg.masked_row_policy {
                    MaskedRowPolicy::Error => {
                        return Err(Error::FullyMaskedRow {
                            row: rows.start + r,
                        })
                    }
                    MaskedRowPolicy::ZeroOutput => {
                        l_block.set(r, f64::NEG_INFINITY);
                        continue;
                    }
                }
            }
            l_block.set(r, row_max.get(r) + sum.ln());
        }
        counters.nonmatmul_flops += 2 * r_len as u64;
        counters.store_from_block((r_len * d + r_len) as u64);

        output
            .view_mut(rows.start, r_len, 0, d)?
            .copy_from(&o_block)?;
        logsumexp.as_mut_slice()[rows.clone()].copy_from_slice(l_block.as_slice());
    }
    Ok(FlashForwardResult { output, logsumexp })
}

/// Per-row dot products of two equal-shape matrices.
///
/// The backward pass uses this on `(O, dO)` to precompute the
/// softmax-gradient correction term, one scalar per sequence row, which is
/// then broadcast across each row of the recomputed score blocks.
pub fn rowwise_dot(a: &Matrix, b: &Matrix, counters: &mut CostCounters) -> Result<RowVector> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Dimension(format!(
            "rowwise_dot needs equal shapes, got {}x{} and {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    if a.is_empty() {
        return Err(Error::Dimension("rowwise_dot of an empty matrix".into()));
    }
    counters.read_interface(2 * a.element_count() as u64);
    let mut out = RowVector::zeros(a.rows());
    for r in 0..a.rows() {
        let dot = a
            .row(r)
            .iter()
            .zip(b.row(r))
            .map(|(x, y)| x * y)
            .sum::<f64>();
        out.set(r, dot);
    }
    counters.nonmatmul_flops += 2 * a.element_count() as u64;
    counters.write_interface(a.rows() as u64);
    Ok(out)
}

pub(crate) struct ColBlockOutput {
    pub dk: Matrix,
    pub dv: Matrix,
    /// Query-gradient contributions as `(row_block, block matrix)` pairs in
    /// ascending row-block order.
    pub dq_contributions: Vec<(usize, Matrix)>,
}

/// Computes the key/value gradients for one column block plus its
/// query-gradient contributions. This is the backward work unit the
/// scheduler distributes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward_col_block(
    col_block: usize,
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    d_out: &Matrix,
    logsumexp: &RowVector,
    correction: &RowVector,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<ColBlockOutput> {
    let d = cfg.head_dim;
    let reduced = cfg.accum_precision == AccumPrecision::Reduced;
    let cols = cfg.block.col_range(col_block)?;
    let c_len = cols.len();

    let k_block = k.block(cols.start, c_len, 0, d)?;
    let v_block = v.block(cols.start, c_len, 0, d)?;
    counters.load_to_block(2 * (c_len * d) as u64);

    let mut dk_block = Matrix::zeros(c_len, d);
    let mut dv_block = Matrix::zeros(c_len, d);
    let mut dq_contributions = Vec::new();

    for row_block in 0..cfg.block.tr {
        let class = if cfg.causal {
            causal_block_classification(row_block, col_block, &cfg.block)?
        } else {
            CausalBlockClass::FullCompute
        };
        if class == CausalBlockClass::Skip {
            counters.blocks_skipped += 1;
            continue;
        }
        let rows = cfg.block.row_range(row_block)?;
        let r_len = rows.len();

        let q_block = q.block(rows.start, r_len, 0, d)?;
        let do_block = d_out.block(rows.start, r_len, 0, d)?;
        let l_block = logsumexp.slice(rows.start, r_len)?;
        let corr_block = correction.slice(rows.start, r_len)?;
        counters.load_to_block((2 * r_len * d + 2 * r_len) as u64);

        let mut s_block = matmul(&q_block, &k_block, true, counters)?;
        counters.block_compute(((r_len + c_len) * d) as u64, (r_len * c_len) as u64);
        for r in 0..r_len {
            let global_row = rows.start + r;
            for (c, s) in s_block.row_mut(r).iter_mut().enumerate() {
                *s *= cfg.softmax_scale;
                if class == CausalBlockClass::PartialMask && cols.start + c > global_row {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
        counters.nonmatmul_flops += (r_len * c_len) as u64;

        // Probabilities recomputed from the stored logsumexp alone:
        // P = exp(S - L). Rows finalized as fully masked carry L = -inf and
        // contribute nothing.
        let mut probs = Matrix::zeros(r_len, c_len);
        for r in 0..r_len {
            let l = l_block.get(r);
            if l == f64::NEG_INFINITY {
                continue;
            }
            for (p, &s) in probs.row_mut(r).iter_mut().zip(s_block.row(r)) {
                *p = (s - l).exp();
            }
        }
        counters.nonmatmul_flops += 2 * (r_len * c_len) as u64;
        counters.block_compute((r_len * c_len) as u64, (r_len * c_len) as u64);

        let dv_add = matmul_at(&probs, &do_block, counters)?;
        let mut dv_view = dv_block.view_mut(0, c_len, 0, d)?;
        dv_view.add_assign_from(&dv_add)?;
        counters.nonmatmul_flops += (c_len * d) as u64;
        counters.block_compute((r_len * c_len + r_len * d) as u64, (c_len * d) as u64);

        let mut dscore = matmul(&do_block, &v_block, true, counters)?;
        counters.block_compute((r_len * d + c_len * d) as u64, (r_len * c_len) as u64);
        for r in 0..r_len {
            let corr = corr_block.get(r);
            for (c, g) in dscore.row_mut(r).iter_mut().enumerate() {
                *g = probs.get(r, c) * (*g - corr) * cfg.softmax_scale;
            }
        }
        counters.nonmatmul_flops += 3 * (r_len * c_len) as u64;
        counters.block_compute(2 * (r_len * c_len) as u64, (r_len * c_len) as u64);

        let dq_add = matmul(&dscore, &k_block, false, counters)?;
        counters.block_compute((r_len * c_len + c_len * d) as u64, (r_len * d) as u64);
        dq_contributions.push((row_block, dq_add));

        let dk_add = matmul_at(&dscore, &q_block, counters)?;
        let mut dk_view = dk_block.view_mut(0, c_len, 0, d)?;
        dk_view.add_assign_from(&dk_add)?;
        counters.nonmatmul_flops += (c_len * d) as u64;
        counters.block_compute((r_len * c_len + r_len * d) as u64, (c_len * d) as u64);

        if reduced {
            round_matrix_to_f32(&mut dk_block);
            round_matrix_to_f32(&mut dv_block);
        }
        counters.blocks_computed += 1;
    }

    counters.store_from_block(2 * (c_len * d) as u64);
    Ok(ColBlockOutput {
        dk: dk_block,
        dv: dv_block,
        dq_contributions,
    })
}

/// Read-modify-write of one query-gradient block against the interface
/// array. Shared by the serial backward and both scheduler merge modes so
/// their counters and rounding behavior agree.
pub(crate) fn apply_dq_contribution(
    dq: &mut Matrix,
    row_start: usize,
    contribution: &Matrix,
    reduced: bool,
    counters: &mut CostCounters,
) -> Result<()> {
    let elems = contribution.element_count() as u64;
    counters.load_to_block(elems);
    let mut view = dq.view_mut(row_start, contribution.rows(), 0, contribution.cols())?;
    view.add_assign_from(contribution)?;
    counters.nonmatmul_flops += elems;
    if reduced {
        for r in 0..contribution.rows() {
            for x in dq.row_mut(row_start + r) {
                *x = *x as f32 as f64;
            }
        }
    }
    counters.store_from_block(elems);
    Ok(())
}

fn validate_backward_inputs(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    o: &Matrix,
    d_out: &Matrix,
    logsumexp: &RowVector,
    cfg: &AttentionConfig,
) -> Result<()> {
    cfg.validate()?;
    cfg.check_shape(q, "Q")?;
    cfg.check_shape(k, "K")?;
    cfg.check_shape(v, "V")?;
    cfg.check_shape(o, "O")?;
    cfg.check_shape(d_out, "dO")?;
    if logsumexp.is_empty() || logsumexp.len() != cfg.seq_len {
        return Err(Error::Contract(format!(
            "backward requires one logsumexp per row ({} expected, got {})",
            cfg.seq_len,
            logsumexp.len()
        )));
    }
    Ok(())
}

/// Tiled backward pass from the forward output, upstream gradient, and
/// stored logsumexp. Returns `(dQ, dK, dV)`.
///
/// Score and probability blocks are recomputed; nothing quadratic in
/// `seq_len` is read or written. The correction vector (row-wise dot of
/// `dO` and `O`) is formed once up front, and each score block's gradient
/// is `P * (dP - correction)` with the correction broadcast across the
/// row. Column blocks own their `dK`/`dV` accumulators exclusively;
/// `dQ` is updated by read-modify-write, one block per inner iteration.
#[allow(clippy::too_many_arguments)]
pub fn flash_backward(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    o: &Matrix,
    d_out: &Matrix,
    logsumexp: &RowVector,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<(Matrix, Matrix, Matrix)> {
    validate_backward_inputs(q, k, v, o, d_out, logsumexp, cfg)?;
    let d = cfg.head_dim;
    let reduced = cfg.accum_precision == AccumPrecision::Reduced;

    let correction = rowwise_dot(o, d_out, counters)?;

    let mut dq = Matrix::zeros(cfg.seq_len, d);
    counters.write_interface((cfg.seq_len * d) as u64);
    let mut dk = Matrix::zeros(cfg.seq_len, d);
    let mut dv = Matrix::zeros(cfg.seq_len, d);

    for col_block in 0..cfg.block.tc {
        let cols = cfg.block.col_range(col_block)?;
        let cb = backward_col_block(
            col_block, q, k, v, d_out, logsumexp, &correction, cfg, counters,
        )?;
        for (row_block, contribution) in &cb.dq_contributions {
            let rows = cfg.block.row_range(*row_block)?;
            apply_dq_contribution(&mut dq, rows.start, contribution, reduced, counters)?;
        }
        dk.view_mut(cols.start, cols.len(), 0, d)?.copy_from(&cb.dk)?;
        dv.view_mut(cols.start, cols.len(), 0, d)?.copy_from(&cb.dv)?;
    }
    Ok((dq, dk, dv))
}

/// Backward pass from the raw running statistics instead of the combined
/// logsumexp.
///
/// Derives `L = m + ln(sum)` exactly as [`finalize_output`] does and then
/// runs the same kernel, so its gradients are bitwise identical to
/// [`flash_backward`] given consistent inputs; the pair demonstrates that
/// the single combined statistic loses nothing the backward pass needs.
#[allow(clippy::too_many_arguments)]
pub fn flash_backward_from_stats(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    o: &Matrix,
    d_out: &Matrix,
    stats: &SoftmaxStats,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<(Matrix, Matrix, Matrix)> {
    if stats.rows() != cfg.seq_len {
        return Err(Error::Contract(format!(
            "stats track {} rows but config has seq_len {}",
            stats.rows(),
            cfg.seq_len
        )));
    }
    let mut logsumexp = RowVector::zeros(cfg.seq_len);
    for r in 0..cfg.seq_len {
        logsumexp.set(r, stats.row_max.get(r) + stats.row_sum.get(r).ln());
    }
    counters.nonmatmul_flops += 2 * cfg.seq_len as u64;
    flash_backward(q, k, v, o, d_out, &logsumexp, cfg, counters)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::naive::{attention_backward_naive, attention_forward_naive, softmax_rows};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn cfg(n: usize, d: usize, br: usize, bc: usize) -> AttentionConfig {
        AttentionConfig::new(n, d)
            .unwrap()
            .with_block_sizes(br, bc)
            .unwrap()
    }

    #[test]
    fn first_step_replaces_the_empty_accumulator() {
        let mut counters = CostCounters::new();
        let stats = SoftmaxStats::fresh(1);
        let o = Matrix::zeros(1, 1);
        let s = Matrix::from_rows(vec![vec![0.0]]).unwrap();
        let v = Matrix::from_rows(vec![vec![2.0]]).unwrap();
        let (stats, o) = online_softmax_step(&stats, &o, &s, &v, &mut counters).unwrap();
        assert_eq!(stats.row_max.get(0), 0.0);
        assert_eq!(stats.row_sum.get(0), 1.0);
        assert_eq!(o.get(0, 0), 2.0);
    }

    #[test]
    fn two_steps_then_finalize() {
        let mut counters = CostCounters::new();
        let stats = SoftmaxStats {
            row_max: RowVector::from_vec(vec![0.0]),
            row_sum: RowVector::from_vec(vec![1.0]),
        };
        let o = Matrix::from_rows(vec![vec![2.0]]).unwrap();
        let s = Matrix::from_rows(vec![vec![0.0]]).unwrap();
        let v = Matrix::from_rows(vec![vec![4.0]]).unwrap();
        let (stats, o) = online_softmax_step(&stats, &o, &s, &v, &mut counters).unwrap();
        assert_eq!(stats.row_max.get(0), 0.0);
        assert_eq!(stats.row_sum.get(0), 2.0);
        assert_eq!(o.get(0, 0), 6.0);

        let (out, lse) =
            finalize_output(&o, &stats, MaskedRowPolicy::Error, &mut counters).unwrap();
        assert_eq!(out.get(0, 0), 3.0);
        assert!((lse.get(0) - 2.0f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn step_rejects_mismatched_stats() {
        let mut counters = CostCounters::new();
        let stats = SoftmaxStats::fresh(2);
        let o = Matrix::zeros(1, 1);
        let s = Matrix::zeros(1, 1);
        let v = Matrix::zeros(1, 1);
        assert!(matches!(
            online_softmax_step(&stats, &o, &s, &v, &mut counters),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn block_order_does_not_change_final_stats() {
        let n = 64;
        let d = 8;
        let bc = 16;
        for seed in 0..50u64 {
            let mut counters = CostCounters::new();
            let q = random_matrix(1, d, 100 + seed);
            let k = random_matrix(n, d, 200 + seed);
            let v = random_matrix(n, d, 300 + seed);
            let s_full = matmul(&q, &k, true, &mut counters).unwrap();

            let mut order: Vec<usize> = (0..n / bc).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
            order.shuffle(&mut rng);

            let mut stats = SoftmaxStats::fresh(1);
            let mut o = Matrix::zeros(1, d);
            for &j in &order {
                let s_blk = s_full.block(0, 1, j * bc, bc).unwrap();
                let v_blk = v.block(j * bc, bc, 0, d).unwrap();
                let (ns, no) =
                    online_softmax_step(&stats, &o, &s_blk, &v_blk, &mut counters).unwrap();
                stats = ns;
                o = no;
            }

            let expect_max = s_full.row(0).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let expect_sum: f64 = s_full.row(0).iter().map(|x| (x - expect_max).exp()).sum();
            assert!((stats.row_max.get(0) - expect_max).abs() < 1e-5);
            assert!((stats.row_sum.get(0) - expect_sum).abs() < 1e-5);
        }
    }

    #[test]
    fn finalize_divides_and_forms_logsumexp() {
        let mut counters = CostCounters::new();
        let stats = SoftmaxStats {
            row_max: RowVector::from_vec(vec![1.0]),
            row_sum: RowVector::from_vec(vec![2.0]),
        };
        let o = Matrix::from_rows(vec![vec![4.0, 6.0]]).unwrap();
        let (out, lse) =
            finalize_output(&o, &stats, MaskedRowPolicy::Error, &mut counters).unwrap();
        assert_eq!(out.row(0), &[2.0, 3.0]);
        assert!((lse.get(0) - (1.0 + 2.0f64.ln())).abs() < 1e-12);

        // Unit sum at zero max is the identity.
        let stats = SoftmaxStats {
            row_max: RowVector::from_vec(vec![0.0]),
            row_sum: RowVector::from_vec(vec![1.0]),
        };
        let (out, lse) =
            finalize_output(&o, &stats, MaskedRowPolicy::Error, &mut counters).unwrap();
        assert_eq!(out.row(0), &[4.0, 6.0]);
        assert_eq!(lse.get(0), 0.0);
    }

    #[test]
    fn finalize_applies_masked_row_policy() {
        let mut counters = CostCounters::new();
        let stats = SoftmaxStats::fresh(1);
        let o = Matrix::zeros(1, 3);
        assert!(matches!(
            finalize_output(&o, &stats, MaskedRowPolicy::Error, &mut counters),
            Err(Error::FullyMaskedRow { row: 0 })
        ));
        let (out, lse) =
            finalize_output(&o, &stats, MaskedRowPolicy::ZeroOutput, &mut counters).unwrap();
        assert_eq!(out.row(0), &[0.0, 0.0, 0.0]);
        assert_eq!(lse.get(0), f64::NEG_INFINITY);
    }

    #[test]
    fn exponentiated_logsumexp_matches_oracle_denominator() {
        let n = 128;
        let d = 16;
        let mut counters = CostCounters::new();
        let q = random_matrix(n, d, 1);
        let k = random_matrix(n, d, 2);
        let v = random_matrix(n, d, 3);
        let cfg = cfg(n, d, 32, 32);
        let res = flash_forward(&q, &k, &v, &cfg, &mut counters).unwrap();
        let oracle = attention_forward_naive(&q, &k, &v, &cfg, &mut counters).unwrap();
        for r in 0..n {
            let mx = oracle
                .scores
                .row(r)
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = oracle.scores.row(r).iter().map(|x| (x - mx).exp()).sum();
            let rebuilt = (res.logsumexp.get(r) - mx).exp();
            assert!(
                (rebuilt - denom).abs() / denom < 1e-5,
                "row {r}: exp(L - m) = {rebuilt} vs denominator {denom}"
            );
        }
    }

    #[test]
    fn classification_examples() {
        let spec = BlockSpec::new(64, 64, 128).unwrap();
        assert_eq!(
            causal_block_classification(0, 1, &spec).unwrap(),
            CausalBlockClass::Skip
        );
        let spec = BlockSpec::new(64, 64, 192).unwrap();
        assert_eq!(
            causal_block_classification(2, 1, &spec).unwrap(),
            CausalBlockClass::FullCompute
        );
        assert_eq!(
            causal_block_classification(1, 1, &spec).unwrap(),
            CausalBlockClass::PartialMask
        );
        assert!(matches!(
            causal_block_classification(3, 0, &spec),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn census_for_square_blocking() {
        let spec = BlockSpec::new(64, 64, 256).unwrap();
        let mut counts = [0usize; 3];
        for i in 0..spec.tr {
            for j in 0..spec.tc {
                match causal_block_classification(i, j, &spec).unwrap() {
                    CausalBlockClass::Skip => counts[0] += 1,
                    CausalBlockClass::PartialMask => counts[1] += 1,
                    CausalBlockClass::FullCompute => counts[2] += 1,
                }
            }
        }
        assert_eq!(counts, [6, 4, 6]);
    }

    #[test]
    fn single_block_reduces_to_direct_formula() {
        let n = 32;
        let d = 8;
        let mut counters = CostCounters::new();
        let q = random_matrix(n, d, 10);
        let k = random_matrix(n, d, 11);
        let v = random_matrix(n, d, 12);
        let cfg = cfg(n, d, n, n);
        let res = flash_forward(&q, &k, &v, &cfg, &mut counters).unwrap();

        // Direct formula in the same shape the one-block stream reduces to:
        // unnormalized exp(S - m) aggregated against V, divided once.
        let mut s = matmul(&q, &k, true, &mut counters).unwrap();
        for r in 0..n {
            for x in s.row_mut(r) {
                *x *= cfg.softmax_scale;
            }
        }
        let mut expect = Matrix::zeros(n, d);
        for r in 0..n {
            let mx = s.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let probs: Vec<f64> = s.row(r).iter().map(|x| (x - mx).exp()).collect();
            let sum: f64 = probs.iter().sum();
            for j in 0..d {
                let mut acc = 0.0;
                for (c, p) in probs.iter().enumerate() {
                    acc += p * v.get(c, j);
                }
                expect.set(r, j, acc / sum);
            }
            let l = mx + sum.ln();
            assert_eq!(res.logsumexp.get(r).to_bits(), l.to_bits(), "row {r} lse");
        }
        assert_eq!(res.output, expect);

        // And the normalized-first formulation agrees to rounding error.
        let reference = matmul(&softmax_rows(&s), &v, false, &mut counters).unwrap();
        assert!(res.output.max_abs_diff(&reference).unwrap() < 1e-13);
    }

    #[test]
    fn forward_matches_oracle_mid_size() {
        let n = 128;
        let d = 64;
        let mut counters = CostCounters::new();
        let q = random_matrix(n, d, 20);
        let k = random_matrix(n, d, 21);
        let v = random_matrix(n, d, 22);
        for causal in [false, true] {
            let cfg = cfg(n, d, 32, 32).with_causal(causal);
            let res = flash_forward(&q, &k, &v, &cfg, &mut counters).unwrap();
            let oracle = attention_forward_naive(&q, &k, &v, &cfg, &mut counters).unwrap();
            assert!(res.output.max_abs_diff(&oracle.output).unwrap() <= 1e-5);
        }
    }

    #[test]
    fn reduced_accumulation_stays_within_loose_tolerance() {
        let n = 96;
        let d = 32;
        let mut counters = CostCounters::new();
        let q = random_matrix(n, d, 30);
        let k = random_matrix(n, d, 31);
        let v = random_matrix(n, d, 32);
        let full_cfg = cfg(n, d, 16, 16);
        let reduced_cfg = full_cfg.with_accum_precision(AccumPrecision::Reduced);
        let oracle = attention_forward_naive(&q, &k, &v, &full_cfg, &mut counters).unwrap();
        let res = flash_forward(&q, &k, &v, &reduced_cfg, &mut counters).unwrap();
        let dev = res.output.max_abs_diff(&oracle.output).unwrap();
        assert!(dev <= 1e-3, "reduced-precision deviation {dev}");
    }

    #[test]
    fn causal_rows_ignore_later_key_perturbations() {
        let n = 128;
        let d = 16;
        let cfg = cfg(n, d, 32, 32).with_causal(true);
        let q = random_matrix(n, d, 40);
        let k = random_matrix(n, d, 41);
        let v = random_matrix(n, d, 42);
        let mut counters = CostCounters::new();
        let base = flash_forward(&q, &k, &v, &cfg, &mut counters).unwrap();

        let mut k2 = k.clone();
        for x in k2.row_mut(100) {
            *x += 3.0;
        }
        let bumped = flash_forward(&q, &k2, &v, &cfg, &mut counters).unwrap();
        for r in 0..100 {
            for c in 0..d {
                assert_eq!(
                    base.output.get(r, c).to_bits(),
                    bumped.output.get(r, c).to_bits(),
                    "row {r} changed"
                );
            }
            assert_eq!(
                base.logsumexp.get(r).to_bits(),
                bumped.logsumexp.get(r).to_bits()
            );
        }
    }

    #[test]
    fn large_logits_stay_finite() {
        let n = 16;
        let d = 4;
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        for r in 0..n {
            q.set(r, 0, (300.0f64).sqrt() * rng.gen_range(0.9..1.0));
            k.set(r, 0, (300.0f64).sqrt() * rng.gen_range(0.9..1.0));
        }
        let v = random_matrix(n, d, 51);
        let cfg = cfg(n, d, 8, 8).with_scale(1.0);
        let mut counters = CostCounters::new();
        let res = flash_forward(&q, &k, &v, &cfg, &mut counters).unwrap();
        assert!(res.output.data().iter().all(|x| x.is_finite()));
        assert!(res.logsumexp.as_slice().iter().all(|x| x.is_finite()));
    }

    #[test]
    fn eager_rescale_matches_but_costs_more_nonmatmul() {
        let n = 128;
        let d = 32;
        let q = random_matrix(n, d, 60);
        let k = random_matrix(n, d, 61);
        let v = random_matrix(n, d, 62);
        let cfg = cfg(n, d, 32, 32);

        let mut deferred_counters = CostCounters::new();
        let deferred = flash_forward(&q, &k, &v, &cfg, &mut deferred_counters).unwrap();
        let mut eager_counters = CostCounters::new();
        let eager =
            flash_forward_eager_rescale(&q, &k, &v, &cfg, &mut eager_counters).unwrap();

        assert!(deferred.output.max_abs_diff(&eager.output).unwrap() < 1e-10);
        assert_eq!(
            deferred_counters.matmul_flops,
            eager_counters.matmul_flops
        );
        assert!(eager_counters.nonmatmul_flops > deferred_counters.nonmatmul_flops);

        let r_deferred =
            crate::instrument::effective_flops_ratio(&deferred_counters).unwrap();
        let r_eager = crate::instrument::effective_flops_ratio(&eager_counters).unwrap();
        assert!(
            r_eager < r_deferred,
            "eager {r_eager} should be below deferred {r_deferred}"
        );
    }

    #[test]
    fn rowwise_dot_basics() {
        let mut counters = CostCounters::new();
        let a = Matrix::from_rows(vec![vec![1.0, 2.0]]).unwrap();
        let b = Matrix::from_rows(vec![vec![3.0, 4.0]]).unwrap();
        assert_eq!(rowwise_dot(&a, &b, &mut counters).unwrap().as_slice(), &[11.0]);

        let z = Matrix::zeros(4, 3);
        let r = random_matrix(4, 3, 70);
        assert_eq!(
            rowwise_dot(&z, &r, &mut counters).unwrap().as_slice(),
            &[0.0; 4]
        );
        assert!(matches!(
            rowwise_dot(&z, &Matrix::zeros(3, 4), &mut counters),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn correction_term_equals_probability_weighted_score_gradient() {
        // rowsum(dO * O) == rowsum(P * dP) row by row.
        let n = 24;
        let d = 8;
        let mut counters = CostCounters::new();
        let q = random_matrix(n, d, 71);
        let k = random_matrix(n, d, 72);
        let v = random_matrix(n, d, 73);
        let g = random_matrix(n, d, 74);
        let cfg = cfg(n, d, 8, 8);
        let fwd = attention_forward_naive(&q, &k, &v, &cfg, &mut counters).unwrap();
        let corr = rowwise_dot(&fwd.output, &g, &mut counters).unwrap();
        let dp = matmul(&g, &v, true, &mut counters).unwrap();
        for r in 0..n {
            let via_probs: f64 = fwd
                .probs
                .row(r)
                .iter()
                .zip(dp.row(r))
                .map(|(p, dp)| p * dp)
                .sum();
            assert!((corr.get(r) - via_probs).abs() < 1e-5);
        }
    }

    #[test]
    fn backward_zero_upstream_is_zero() {
        let n = 32;
        let d = 8;
        let mut counters = CostCounters::new();
        let q = random_matrix(n, d, 80);
        let k = random_matrix(n, d, 81);
        let v = random_matrix(n, d, 82);
        let cfg = cfg(n, d, 16, 16);
        let fwd = flash_forward(&q, &k, &v, &cfg, &mut counters).unwrap();
        let zero = Matrix::zeros(n, d);
        let (dq, dk, dv) = flash_backward(
            &q,
            &k,
            &v,
            &fwd.output,
            &zero,
            &fwd.logsumexp,
            &cfg,
            &mut counters,
        )
        .unwrap();
        assert_eq!(dq, Matrix::zeros(n, d));
        assert_eq!(dk, Matrix::zeros(n, d));
        assert_eq!(dv, Matrix::zeros(n, d));
    }

    #[test]
    fn backward_matches_oracle_many_seeds() {
        let n = 64;
        let d = 16;
        for causal in [false, true] {
            let cfg = cfg(n, d, 16, 16).with_causal(causal);
            for seed in 0..50u64 {
                let mut counters = CostCounters::new();
                let q = random_matrix(n, d, 1000 + seed);
                let k = random_matrix(n, d, 2000 + seed);
                let v = random_matrix(n, d, 3000 + seed);
                let g = random_matrix(n, d, 4000 + seed);

                let fwd = flash_forward(&q, &k, &v, &cfg, &mut counters).unwrap();
                let (dq, dk, dv) = flash_backward(
                    &q,
                    &k,
                    &v,
                    &fwd.output,
                    &g,
                    &fwd.logsumexp,
                    &cfg,
                    &mut counters,
                )
                .unwrap();

                let oracle_fwd =
                    attention_forward_naive(&q, &k, &v, &cfg, &mut counters).unwrap();
                let (odq, odk, odv) = attention_backward_naive(
                    &q,
                    &k,
                    &v,
                    &oracle_fwd.probs,
                    &g,
                    &cfg,
                    &mut counters,
                )
                .unwrap();

                assert!(dq.max_abs_diff(&odq).unwrap() <= 1e-5, "dq seed {seed}");
                assert!(dk.max_abs_diff(&odk).unwrap() <= 1e-5, "dk seed {seed}");
                assert!(dv.max_abs_diff(&odv).unwrap() <= 1e-5, "dv seed {seed}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let n = 32;
        let d = 4;
        let cfg = cfg(n, d, 16, 16);
        let q = random_matrix(n, d, 90);
        let k = random_matrix(n, d, 91);
        let v = random_matrix(n, d, 92);
        let g = random_matrix(n, d, 93);
        let mut counters = CostCounters::new();

        let fwd = flash_forward(&q, &k, &v, &cfg, &mut counters).unwrap();
        let (dq, dk, dv) = flash_backward(
            &q,
            &k,
            &v,
            &fwd.output,
            &g,
            &fwd.logsumexp,
            &cfg,
            &mut counters,
        )
        .unwrap();

        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| -> f64 {
            let mut scratch = CostCounters::new();
            let out = flash_forward(q, k, v, &cfg, &mut scratch).unwrap().output;
            out.data()
                .iter()
                .zip(g.data())
                .map(|(a, b)| a * b)
                .sum()
        };

        let h = 1e-4;
        let check = |analytic: &Matrix, which: usize| {
            for r in 0..n {
                for c in 0..d {
                    let perturb = |sign: f64| -> f64 {
                        let mut qp = q.clone();
                        let mut kp = k.clone();
                        let mut vp = v.clone();
                        match which {
                            0 => qp.set(r, c, q.get(r, c) + sign * h),
                            1 => kp.set(r, c, k.get(r, c) + sign * h),
                            _ => vp.set(r, c, v.get(r, c) + sign * h),
                        }
                        loss(&qp, &kp, &vp)
                    };
                    let fd = (perturb(1.0) - perturb(-1.0)) / (2.0 * h);
                    assert!(
                        (analytic.get(r, c) - fd).abs() < 1e-4,
                        "operand {which} ({r},{c}): {} vs {fd}",
                        analytic.get(r, c)
                    );
                }
            }
        };
        check(&dq, 0);
        check(&dk, 1);
        check(&dv, 2);
    }

    #[test]
    fn backward_requires_logsumexp() {
        let n = 16;
        let d = 4;
        let cfg = cfg(n, d, 8, 8);
        let q = random_matrix(n, d, 94);
        let m = Matrix::zeros(n, d);
        let mut counters = CostCounters::new();
        let empty = RowVector::zeros(0);
        assert!(matches!(
            flash_backward(&q, &q, &q, &m, &m, &empty, &cfg, &mut counters),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn stored_stats_and_logsumexp_give_identical_gradients() {
        let n = 64;
        let d = 16;
        let cfg = cfg(n, d, 16, 16);
        let q = random_matrix(n, d, 95);
        let k = random_matrix(n, d, 96);
        let v = random_matrix(n, d, 97);
        let g = random_matrix(n, d, 98);
        let mut counters = CostCounters::new();

        let (fwd, stats) = flash_forward_with_stats(&q, &k, &v, &cfg, &mut counters).unwrap();
        let from_l = flash_backward(
            &q,
            &k,
            &v,
            &fwd.output,
            &g,
            &fwd.logsumexp,
            &cfg,
            &mut counters,
        )
        .unwrap();
        let from_stats = flash_backward_from_stats(
            &q,
            &k,
            &v,
            &fwd.output,
            &g,
            &stats,
            &cfg,
            &mut counters,
        )
        .unwrap();

        for (a, b) in [
            (&from_l.0, &from_stats.0),
            (&from_l.1, &from_stats.1),
            (&from_l.2, &from_stats.2),
        ] {
            assert_eq!(a.rows(), b.rows());
            for r in 0..a.rows() {
                for c in 0..a.cols() {
                    assert_eq!(a.get(r, c).to_bits(), b.get(r, c).to_bits());
                }
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn forward_matches_oracle_on_random_configs(
            n in 1usize..48,
            d in 1usize..12,
            br in 1usize..24,
            bc in 1usize..24,
            causal in proptest::bool::ANY,
            seed in 0u64..10_000,
        ) {
            let mut counters = CostCounters::new();
            let q = random_matrix(n, d, seed);
            let k = random_matrix(n, d, seed + 1);
            let v = random_matrix(n, d, seed + 2);
            let cfg = cfg(n, d, br, bc).with_causal(causal);
            let res = flash_forward(&q, &k, &v, &cfg, &mut counters).unwrap();
            let oracle = attention_forward_naive(&q, &k, &v, &cfg, &mut counters).unwrap();
            prop_assert!(res.output.max_abs_diff(&oracle.output).unwrap() <= 1e-5);
        }
    }
}
