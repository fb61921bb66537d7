//! Head layouts and the batched multi-head driver.
//!
//! A layout pairs a query-head count with a key/value-head count that
//! divides it. Multi-head attention keeps them equal, multi-query keeps a
//! single key/value head, and grouped-query layouts sit in between:
//! consecutive groups of `n_q_heads / n_kv_heads` query heads share one
//! key/value head. Sharing shrinks key/value storage by exactly the group
//! size without changing any output, because every query head still
//! attends over a full key/value sequence.

use crate::config::AttentionConfig;
use crate::error::{Error, Result};
use crate::flash::{flash_backward, flash_forward, FlashForwardResult};
use crate::instrument::CostCounters;
use crate::matrix::{Matrix, RowVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadLayout {
    pub n_q_heads: usize,
    pub n_kv_heads: usize,
}

impl HeadLayout {
    pub fn new(n_q_heads: usize, n_kv_heads: usize) -> Result<Self> {
        if n_q_heads == 0 || n_kv_heads == 0 {
            return Err(Error::Config(
                "head counts must be positive".into(),
            ));
        }
        if !n_q_heads.is_multiple_of(n_kv_heads) {
            return Err(Error::Config(format!(
                "{n_kv_heads} key/value heads do not evenly divide {n_q_heads} query heads"
            )));
        }
        Ok(HeadLayout {
            n_q_heads,
            n_kv_heads,
        })
    }

    /// One key/value head per query head.
    pub fn mha(n_heads: usize) -> Result<Self> {
        Self::new(n_heads, n_heads)
    }

    /// A single key/value head shared by every query head.
    pub fn mqa(n_q_heads: usize) -> Result<Self> {
        Self::new(n_q_heads, 1)
    }

    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    /// The key/value head that query head `q_head` reads.
    pub fn kv_head_index(&self, q_head: usize) -> Result<usize> {
        if q_head >= self.n_q_heads {
            return Err(Error::Index(format!(
                "query head {q_head} out of range for {} heads",
                self.n_q_heads
            )));
        }
        Ok(q_head / self.group_size())
    }
}

/// Per-batch, per-head input tensors. Query slots are indexed
/// `batch * n_q_heads + q_head`; key and value slots are indexed
/// `batch * n_kv_heads + kv_head`, so shared heads are stored once.
#[derive(Debug, Clone)]
pub struct BatchedTensors {
    pub batch_size: usize,
    pub layout: HeadLayout,
    pub seq_len: usize,
    pub head_dim: usize,
    q: Vec<Matrix>,
    k: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl BatchedTensors {
    pub fn zeros(
        batch_size: usize,
        layout: HeadLayout,
        seq_len: usize,
        head_dim: usize,
    ) -> Result<Self> {
        if batch_size == 0 || seq_len == 0 || head_dim == 0 {
            return Err(Error::Config(
                "batch size, sequence length, and head dim must be positive".into(),
            ));
        }
        let q = (0..batch_size * layout.n_q_heads)
            .map(|_| Matrix::zeros(seq_len, head_dim))
            .collect();
        let kv = |n: usize| -> Vec<Matrix> {
            (0..n).map(|_| Matrix::zeros(seq_len, head_dim)).collect()
        };
        Ok(BatchedTensors {
            batch_size,
            layout,
            seq_len,
            head_dim,
            q,
            k: kv(batch_size * layout.n_kv_heads),
            v: kv(batch_size * layout.n_kv_heads),
        })
    }

    fn q_slot(&self, batch: usize, q_head: usize) -> Result<usize> {
        if batch >= self.batch_size {
            return Err(Error::Index(format!(
                "batch {batch} out of range for batch size {}",
                self.batch_size
            )));
        }
        self.layout.kv_head_index(q_head)?;
        Ok(batch * self.layout.n_q_heads + q_head)
    }

    fn kv_slot(&self, batch: usize, q_head: usize) -> Result<usize> {
        let kv_head = self.layout.kv_head_index(q_head)?;
        Ok(batch * self.layout.n_kv_heads + kv_head)
    }

    pub fn q(&self, batch: usize, q_head: usize) -> Result<&Matrix> {
        Ok(&self.q[self.q_slot(batch, q_head)?])
    }

    pub fn q_mut(&mut self, batch: usize, q_head: usize) -> Result<&mut Matrix> {
        let slot = self.q_slot(batch, q_head)?;
        Ok(&mut self.q[slot])
    }

    /// The key tensor query head `q_head` attends over.
    pub fn k_for(&self, batch: usize, q_head: usize) -> Result<&Matrix> {
        Ok(&self.k[self.kv_slot(batch, q_head)?])
    }

    pub fn v_for(&self, batch: usize, q_head: usize) -> Result<&Matrix> {
        Ok(&self.v[self.kv_slot(batch, q_head)?])
    }

    pub fn k_mut(&mut self, batch: usize, q_head: usize) -> Result<&mut Matrix> {
        let slot = self.kv_slot(batch, q_head)?;
        Ok(&mut self.k[slot])
    }

    pub fn v_mut(&mut self, batch: usize, q_head: usize) -> Result<&mut Matrix> {
        let slot = self.kv_slot(batch, q_head)?;
        Ok(&mut self.v[slot])
    }

    /// Elements held by the key and value tensors together. Scales with
    /// the key/value head count, not the query head count.
    pub fn kv_storage_elements(&self) -> u64 {
        (self.k.len() + self.v.len()) as u64 * (self.seq_len * self.head_dim) as u64
    }
}

/// Forward outputs plus the logsumexp rows the backward pass consumes,
/// indexed like the query slots.
#[derive(Debug, Clone)]
pub struct ForwardArtifacts {
    pub outputs: Vec<Matrix>,
    pub logsumexps: Vec<RowVector>,
}

#[derive(Debug, Clone)]
pub struct BatchedGradients {
    /// Indexed `batch * n_q_heads + q_head`.
    pub dq: Vec<Matrix>,
    /// Indexed `batch * n_kv_heads + kv_head`; shared heads accumulate
    /// every member query head's contribution.
    pub dk: Vec<Matrix>,
    pub dv: Vec<Matrix>,
}

fn check_per_head_config(tensors: &BatchedTensors, cfg: &AttentionConfig) -> Result<()> {
    if tensors.seq_len != cfg.seq_len || tensors.head_dim != cfg.head_dim {
        return Err(Error::Dimension(format!(
            "tensors are {}x{} per head but config expects {}x{}",
            tensors.seq_len, tensors.head_dim, cfg.seq_len, cfg.head_dim
        )));
    }
    Ok(())
}

/// Runs the tiled forward pass for every `(batch, query head)` pair in
/// ascending slot order.
pub fn multihead_forward(
    tensors: &BatchedTensors,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<ForwardArtifacts> {
    check_per_head_config(tensors, cfg)?;
    let mut outputs = Vec::with_capacity(tensors.batch_size * tensors.layout.n_q_heads);
    let mut logsumexps = Vec::with_capacity(outputs.capacity());
    for batch in 0..tensors.batch_size {
        for q_head in 0..tensors.layout.n_q_heads {
            let FlashForwardResult { output, logsumexp } = flash_forward(
                tensors.q(batch, q_head)?,
                tensors.k_for(batch, q_head)?,
                tensors.v_for(batch, q_head)?,
                cfg,
                counters,
            )?;
            outputs.push(output);
            logsumexps.push(logsumexp);
        }
    }
    Ok(ForwardArtifacts {
        outputs,
        logsumexps,
    })
}

/// Runs the tiled backward pass for every `(batch, query head)` pair.
///
/// Query gradients are per slot. Key and value gradients land in the
/// shared key/value slots; member heads of a group are accumulated in
/// ascending query-head order, so results do not depend on layout choice
/// beyond the sharing itself.
pub fn multihead_backward(
    tensors: &BatchedTensors,
    artifacts: &ForwardArtifacts,
    d_outputs: &[Matrix],
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<BatchedGradients> {
    check_per_head_config(tensors, cfg)?;
    let n_slots = tensors.batch_size * tensors.layout.n_q_heads;
    if artifacts.outputs.len() != n_slots || artifacts.logsumexps.len() != n_slots {
        return Err(Error::Contract(format!(
            "artifacts cover {} slots but tensors have {n_slots}",
            artifacts.outputs.len()
        )));
    }
    if d_outputs.len() != n_slots {
        return Err(Error::Contract(format!(
            "{} upstream gradients for {n_slots} slots",
            d_outputs.len()
        )));
    }

    let mut dq = Vec::with_capacity(n_slots);
    let kv_slots = tensors.batch_size * tensors.layout.n_kv_heads;
    let mut dk: Vec<Matrix> = (0..kv_slots)
        .map(|_| Matrix::zeros(tensors.seq_len, tensors.head_dim))
        .collect();
    let mut dv = dk.clone();

    for batch in 0..tensors.batch_size {
        for q_head in 0..tensors.layout.n_q_heads {
            let slot = batch * tensors.layout.n_q_heads + q_head;
            let (dq_head, dk_head, dv_head) = flash_backward(
                tensors.q(batch, q_head)?,
                tensors.k_for(batch, q_head)?,
                tensors.v_for(batch, q_head)?,
                &artifacts.outputs[slot],
                &d_outputs[slot],
                &artifacts.logsumexps[slot],
                cfg,
                counters,
            )?;
            dq.push(dq_head);
            let kv_slot = batch * tensors.layout.n_kv_heads
                + tensors.layout.kv_head_index(q_head)?;
            dk[kv_slot]
                .view_mut(0, tensors.seq_len, 0, tensors.head_dim)?
                .add_assign_from(&dk_head)?;
            dv[kv_slot]
                .view_mut(0, tensors.seq_len, 0, tensors.head_dim)?
                .add_assign_from(&dv_head)?;
        }
    }
    Ok(BatchedGradients { dq, dk, dv })
}
