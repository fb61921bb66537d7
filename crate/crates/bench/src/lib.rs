//! Constant-token benchmark sweeps over the attention kernels.
//!
//! A sweep holds the total token count fixed: each sequence length runs
//! with `batch = token_budget / seq_len`, so short-sequence rows process
//! many sequences and long-sequence rows few, and wall times stay
//! comparable across the sweep. Every `(method, seq_len)` case validates
//! its numerics against the quadratic reference before any timing, and
//! each timed case reports both measured wall time and the modeled cost
//! counters from an instrumented run.

use std::io::{Read, Write};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use tileattn::heads::multihead_backward;
use tileattn::naive::{attention_backward_naive, attention_forward_naive, NaiveForwardResult};
use tileattn::scheduler::{run_backward_parallel, run_forward_parallel};
use tileattn::{
    autotune_block_sizes, flash_backward, flash_forward, flops_backward_model,
    flops_forward_model, multihead_forward, predict_runtime, AttentionConfig, BatchedTensors,
    CostCounters, CostModel, ForwardArtifacts, HeadLayout, Matrix, SchedulerConfig,
};

/// Largest allowed deviation from the quadratic reference before a method
/// is allowed to be timed.
pub const VALIDATION_TOLERANCE: f64 = 1e-5;

/// Block shapes the autotuner considers.
pub const AUTOTUNE_CANDIDATES: [(usize, usize); 4] =
    [(64, 64), (64, 128), (128, 64), (128, 128)];

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("configuration: {0}")]
    Config(String),
    #[error(
        "validation failed for {method}: max deviation {max_abs_dev:e} exceeds tolerance 1e-5"
    )]
    Validation { method: String, max_abs_dev: f64 },
    #[error("io: {0}")]
    Io(String),
    #[error("contract: {0}")]
    Contract(String),
    #[error(transparent)]
    Core(#[from] tileattn::Error),
}

impl BenchError {
    /// Process exit code for this failure class. Configuration and
    /// internal errors exit 2 (matching the argument parser), failed
    /// numeric validation exits 3, and I/O failures exit 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            BenchError::Config(_) | BenchError::Contract(_) | BenchError::Core(_) => 2,
            BenchError::Validation { .. } => 3,
            BenchError::Io(_) => 4,
        }
    }
}

impl From<csv::Error> for BenchError {
    fn from(e: csv::Error) -> Self {
        BenchError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Method {
    /// Quadratic-memory reference implementation.
    Naive,
    /// Tiled kernel with online softmax.
    Flash,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Flash => "flash",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum PassKind {
    /// Forward only.
    Fwd,
    /// Backward only; the forward artifacts are prepared outside the
    /// timed region.
    Bwd,
    /// Forward immediately followed by backward, timed together.
    #[value(name = "fwd-bwd")]
    FwdBwd,
}

impl PassKind {
    pub fn label(&self) -> &'static str {
        match self {
            PassKind::Fwd => "fwd",
            PassKind::Bwd => "bwd",
            PassKind::FwdBwd => "fwd+bwd",
        }
    }

    fn includes_backward(&self) -> bool {
        !matches!(self, PassKind::Fwd)
    }
}

#[derive(Debug, Clone)]
pub struct BenchSpec {
    pub seq_lens: Vec<usize>,
    /// Total tokens per case; batch size is this divided by the sequence
    /// length.
    pub token_budget: usize,
    pub head_dim: usize,
    /// Model width; the head count is this divided by `head_dim`.
    pub hidden_dim: usize,
    pub causal: bool,
    pub methods: Vec<Method>,
    pub pass: PassKind,
    /// Timed repetitions per case; the reported wall time is the median.
    pub repeats: usize,
    pub seed: u64,
    pub workers: usize,
    pub block_rows: usize,
    pub block_cols: usize,
    /// Pick block sizes by timing the candidates instead of using
    /// `block_rows`/`block_cols`.
    pub autotune: bool,
    /// Sequence lengths above this skip the quadratic reference rather
    /// than materializing enormous score matrices.
    pub naive_max_seq_len: usize,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            seq_lens: vec![256, 512, 1024, 2048],
            token_budget: 2048,
            head_dim: 64,
            hidden_dim: 512,
            causal: false,
            methods: vec![Method::Naive, Method::Flash],
            pass: PassKind::Fwd,
            repeats: 3,
            seed: 0,
            workers: 1,
            block_rows: 64,
            block_cols: 64,
            autotune: false,
            naive_max_seq_len: 4096,
        }
    }
}

/// One benchmark measurement, also the CSV row schema (fields serialize
/// in declaration order).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub method: String,
    pub seq_len: usize,
    pub batch: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub causal: bool,
    pub pass: String,
    pub wall_time_s: f64,
    /// Modeled FLOPs for the pass (not the counter total): the standard
    /// `4 * N^2 * d * heads * batch` forward count, halved under causal
    /// masking, with backward at 2.5x forward.
    pub model_flops: u64,
    pub achieved_flops_per_s: f64,
    pub matmul_flops: u64,
    pub nonmatmul_flops: u64,
    pub hbm_read_bytes: u64,
    pub hbm_write_bytes: u64,
    pub sram_read_bytes: u64,
    pub sram_write_bytes: u64,
    pub blocks_computed: u64,
    pub blocks_skipped: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedCase {
    pub method: String,
    pub seq_len: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchRun {
    pub rows: Vec<BenchRow>,
    pub skipped: Vec<SkippedCase>,
    pub notes: Vec<String>,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn tensor_seed(seed: u64, role: u64, batch: u64, head: u64, seq_len: u64) -> u64 {
    let mut s = mix(seed);
    for x in [role, batch, head, seq_len] {
        s = mix(s ^ x);
    }
    s
}

fn fill_normal(m: &mut Matrix, rng: &mut ChaCha8Rng, scale: f64) {
    for r in 0..m.rows() {
        for x in m.row_mut(r) {
            let sample: f64 = StandardNormal.sample(rng);
            *x = sample * scale;
        }
    }
}

/// Deterministic benchmark inputs: every tensor gets its own stream keyed
/// by `(seed, role, batch, head, seq_len)`, with entries drawn from a
/// standard normal scaled by `1/sqrt(head_dim)` so score magnitudes stay
/// flat as the head dimension grows.
pub fn generate_inputs(
    batch: usize,
    n_heads: usize,
    seq_len: usize,
    head_dim: usize,
    seed: u64,
    with_grads: bool,
) -> Result<(BatchedTensors, Vec<Matrix>), BenchError> {
    let layout = HeadLayout::mha(n_heads)?;
    let mut tensors = BatchedTensors::zeros(batch, layout, seq_len, head_dim)?;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut grads = Vec::new();
    for b in 0..batch {
        for h in 0..n_heads {
            let rng_for = |role: u64| {
                ChaCha8Rng::seed_from_u64(tensor_seed(
                    seed,
                    role,
                    b as u64,
                    h as u64,
                    seq_len as u64,
                ))
            };
            fill_normal(tensors.q_mut(b, h)?, &mut rng_for(0), scale);
            fill_normal(tensors.k_mut(b, h)?, &mut rng_for(1), scale);
            fill_normal(tensors.v_mut(b, h)?, &mut rng_for(2), scale);
            if with_grads {
                let mut g = Matrix::zeros(seq_len, head_dim);
                fill_normal(&mut g, &mut rng_for(3), scale);
                grads.push(g);
            }
        }
    }
    Ok((tensors, grads))
}

enum Prepared {
    None,
    Naive(Vec<NaiveForwardResult>),
    Flash(ForwardArtifacts),
}

fn prepare_backward_state(
    method: Method,
    tensors: &BatchedTensors,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<Prepared, BenchError> {
    let n_heads = tensors.layout.n_q_heads;
    match method {
        Method::Naive => {
            let mut results = Vec::new();
            for b in 0..tensors.batch_size {
                for h in 0..n_heads {
                    results.push(attention_forward_naive(
                        tensors.q(b, h)?,
                        tensors.k_for(b, h)?,
                        tensors.v_for(b, h)?,
                        cfg,
                        counters,
                    )?);
                }
            }
            Ok(Prepared::Naive(results))
        }
        Method::Flash => Ok(Prepared::Flash(multihead_forward(tensors, cfg, counters)?)),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_case_once(
    method: Method,
    pass: PassKind,
    prepared: &Prepared,
    tensors: &BatchedTensors,
    grads: &[Matrix],
    cfg: &AttentionConfig,
    workers: usize,
    counters: &mut CostCounters,
) -> Result<(), BenchError> {
    let n_heads = tensors.layout.n_q_heads;
    match method {
        Method::Naive => match pass {
            PassKind::Fwd => {
                for b in 0..tensors.batch_size {
                    for h in 0..n_heads {
                        attention_forward_naive(
                            tensors.q(b, h)?,
                            tensors.k_for(b, h)?,
                            tensors.v_for(b, h)?,
                            cfg,
                            counters,
                        )?;
                    }
                }
            }
            PassKind::Bwd => {
                let Prepared::Naive(results) = prepared else {
                    return Err(BenchError::Contract(
                        "naive backward requires prepared forward results".into(),
                    ));
                };
                for b in 0..tensors.batch_size {
                    for h in 0..n_heads {
                        let slot = b * n_heads + h;
                        attention_backward_naive(
                            tensors.q(b, h)?,
                            tensors.k_for(b, h)?,
                            tensors.v_for(b, h)?,
                            &results[slot].probs,
                            &grads[slot],
                            cfg,
                            counters,
                        )?;
                    }
                }
            }
            PassKind::FwdBwd => {
                for b in 0..tensors.batch_size {
                    for h in 0..n_heads {
                        let slot = b * n_heads + h;
                        let fwd = attention_forward_naive(
                            tensors.q(b, h)?,
                            tensors.k_for(b, h)?,
                            tensors.v_for(b, h)?,
                            cfg,
                            counters,
                        )?;
                        attention_backward_naive(
                            tensors.q(b, h)?,
                            tensors.k_for(b, h)?,
                            tensors.v_for(b, h)?,
                            &fwd.probs,
                            &grads[slot],
                            cfg,
                            counters,
                        )?;
                    }
                }
            }
        },
        Method::Flash => {
            let sched = SchedulerConfig::new(workers);
            match pass {
                PassKind::Fwd => {
                    if workers == 1 {
                        multihead_forward(tensors, cfg, counters)?;
                    } else {
                        let (_, c) = run_forward_parallel(tensors, cfg, &sched)?;
                        counters.merge(&c);
                    }
                }
                PassKind::Bwd => {
                    let Prepared::Flash(artifacts) = prepared else {
                        return Err(BenchError::Contract(
                            "tiled backward requires prepared forward artifacts".into(),
                        ));
                    };
                    if workers == 1 {
                        multihead_backward(tensors, artifacts, grads, cfg, counters)?;
                    } else {
                        let (_, c) =
                            run_backward_parallel(tensors, artifacts, grads, cfg, &sched)?;
                        counters.merge(&c);
                    }
                }
                PassKind::FwdBwd => {
                    if workers == 1 {
                        let artifacts = multihead_forward(tensors, cfg, counters)?;
                        multihead_backward(tensors, &artifacts, grads, cfg, counters)?;
                    } else {
                        let (artifacts, c) = run_forward_parallel(tensors, cfg, &sched)?;
                        counters.merge(&c);
                        let (_, c) =
                            run_backward_parallel(tensors, &artifacts, grads, cfg, &sched)?;
                        counters.merge(&c);
                    }
                }
            }
        }
    }
    Ok(())
}

/// Checks a method's numerics on the first `(batch, head)` slot against
/// the quadratic reference before it is timed. Returns the largest
/// deviation seen across whatever the pass produces.
fn validate_case(
    method: Method,
    pass: PassKind,
    tensors: &BatchedTensors,
    grads: &[Matrix],
    cfg: &AttentionConfig,
) -> Result<f64, BenchError> {
    let mut scratch = CostCounters::new();
    let q = tensors.q(0, 0)?;
    let k = tensors.k_for(0, 0)?;
    let v = tensors.v_for(0, 0)?;
    let oracle = attention_forward_naive(q, k, v, cfg, &mut scratch)?;

    let mut max_dev: f64 = 0.0;
    match method {
        Method::Naive => {
            // The reference validates against itself, so the deviation is
            // identically zero; the call still exercises the full path.
            let again = attention_forward_naive(q, k, v, cfg, &mut scratch)?;
            max_dev = max_dev.max(again.output.max_abs_diff(&oracle.output)?);
        }
        Method::Flash => {
            let fwd = flash_forward(q, k, v, cfg, &mut scratch)?;
            max_dev = max_dev.max(fwd.output.max_abs_diff(&oracle.output)?);
            if pass.includes_backward() {
                let g = &grads[0];
                let (dq, dk, dv) = flash_backward(
                    q,
                    k,
                    v,
                    &fwd.output,
                    g,
                    &fwd.logsumexp,
                    cfg,
                    &mut scratch,
                )?;
                let (odq, odk, odv) =
                    attention_backward_naive(q, k, v, &oracle.probs, g, cfg, &mut scratch)?;
                max_dev = max_dev.max(dq.max_abs_diff(&odq)?);
                max_dev = max_dev.max(dk.max_abs_diff(&odk)?);
                max_dev = max_dev.max(dv.max_abs_diff(&odv)?);
            }
        }
    }
    if max_dev > VALIDATION_TOLERANCE {
        return Err(BenchError::Validation {
            method: method.name().to_string(),
            max_abs_dev: max_dev,
        });
    }
    Ok(max_dev)
}

fn median(samples: &mut [f64]) -> f64 {
    samples.sort_by(|a, b| a.partial_cmp(b).expect("wall times are finite"));
    let mid = samples.len() / 2;
    if samples.len() % 2 == 1 {
        samples[mid]
    } else {
        (samples[mid - 1] + samples[mid]) / 2.0
    }
}

fn validate_spec(spec: &BenchSpec) -> Result<usize, BenchError> {
    if spec.seq_lens.is_empty() {
        return Err(BenchError::Config("no sequence lengths given".into()));
    }
    if spec.methods.is_empty() {
        return Err(BenchError::Config("no methods given".into()));
    }
    if spec.repeats == 0 {
        return Err(BenchError::Config("repeats must be positive".into()));
    }
    if spec.workers == 0 {
        return Err(BenchError::Config("workers must be positive".into()));
    }
    if spec.head_dim == 0 || spec.hidden_dim == 0 {
        return Err(BenchError::Config(
            "head_dim and hidden_dim must be positive".into(),
        ));
    }
    if !spec.hidden_dim.is_multiple_of(spec.head_dim) {
        return Err(BenchError::Config(format!(
            "head_dim {} does not divide hidden_dim {}",
            spec.head_dim, spec.hidden_dim
        )));
    }
    for &n in &spec.seq_lens {
        if n == 0 {
            return Err(BenchError::Config("sequence length 0".into()));
        }
        if !spec.token_budget.is_multiple_of(n) || spec.token_budget < n {
            return Err(BenchError::Config(format!(
                "sequence length {n} does not divide token budget {}",
                spec.token_budget
            )));
        }
    }
    Ok(spec.hidden_dim / spec.head_dim)
}

/// Runs the full sweep described by `spec`: for every sequence length and
/// method, validate, run once instrumented (which doubles as warmup),
/// then time `repeats` runs and keep the median.
pub fn run_benchmark(spec: &BenchSpec) -> Result<BenchRun, BenchError> {
    let n_heads = validate_spec(spec)?;
    let model = CostModel::default();
    let mut run = BenchRun::default();

    for &seq_len in &spec.seq_lens {
        let batch = spec.token_budget / seq_len;
        let (tensors, grads) = generate_inputs(
            batch,
            n_heads,
            seq_len,
            spec.head_dim,
            spec.seed,
            spec.pass.includes_backward(),
        )?;

        let mut cfg = AttentionConfig::new(seq_len, spec.head_dim)?
            .with_causal(spec.causal)
            .with_block_sizes(spec.block_rows, spec.block_cols)?;
        if spec.autotune && spec.methods.contains(&Method::Flash) {
            let outcome = autotune_block_sizes(
                &AUTOTUNE_CANDIDATES,
                tensors.q(0, 0)?,
                tensors.k_for(0, 0)?,
                tensors.v_for(0, 0)?,
                &cfg,
                spec.repeats,
                192 * 1024,
                model.element_size,
            )?;
            run.notes.push(format!(
                "seq_len {seq_len}: autotuned block sizes {}x{}",
                outcome.best.0, outcome.best.1
            ));
            cfg = cfg.with_block_sizes(outcome.best.0, outcome.best.1)?;
        }

        for &method in &spec.methods {
            if method == Method::Naive && seq_len > spec.naive_max_seq_len {
                run.skipped.push(SkippedCase {
                    method: method.name().to_string(),
                    seq_len,
                    reason: format!(
                        "score matrix would exceed the {}-token reference cap",
                        spec.naive_max_seq_len
                    ),
                });
                continue;
            }

            validate_case(method, spec.pass, &tensors, &grads, &cfg)?;

            let prepared = if spec.pass == PassKind::Bwd {
                let mut scratch = CostCounters::new();
                prepare_backward_state(method, &tensors, &cfg, &mut scratch)?
            } else {
                Prepared::None
            };

            let mut counters = CostCounters::new();
            run_case_once(
                method,
                spec.pass,
                &prepared,
                &tensors,
                &grads,
                &cfg,
                spec.workers,
                &mut counters,
            )?;

            let mut samples = Vec::with_capacity(spec.repeats);
            for _ in 0..spec.repeats {
                let mut scratch = CostCounters::new();
                let start = Instant::now();
                run_case_once(
                    method,
                    spec.pass,
                    &prepared,
                    &tensors,
                    &grads,
                    &cfg,
                    spec.workers,
                    &mut scratch,
                )?;
                samples.push(start.elapsed().as_secs_f64());
            }
            let wall_time_s = median(&mut samples);

            let forward_flops = flops_forward_model(seq_len, spec.head_dim, n_heads, spec.causal)?
                * batch as u64;
            let model_flops = match spec.pass {
                PassKind::Fwd => forward_flops,
                PassKind::Bwd => flops_backward_model(forward_flops),
                PassKind::FwdBwd => forward_flops + flops_backward_model(forward_flops),
            };

            let snapshot = counters.snapshot(model.element_size);
            run.rows.push(BenchRow {
                method: method.name().to_string(),
                seq_len,
                batch,
                head_dim: spec.head_dim,
                n_heads,
                causal: spec.causal,
                pass: spec.pass.label().to_string(),
                wall_time_s,
                model_flops,
                achieved_flops_per_s: model_flops as f64 / wall_time_s,
                matmul_flops: snapshot[0].1,
                nonmatmul_flops: snapshot[1].1,
                hbm_read_bytes: snapshot[2].1,
                hbm_write_bytes: snapshot[3].1,
                sram_read_bytes: snapshot[4].1,
                sram_write_bytes: snapshot[5].1,
                blocks_computed: snapshot[6].1,
                blocks_skipped: snapshot[7].1,
            });
        }
    }
    Ok(run)
}

/// Writes rows as CSV with a fixed header. Refuses to emit an empty table
/// rather than produce a header-only file that downstream tooling would
/// misread as a completed sweep.
pub fn emit_csv<W: Write>(rows: &[BenchRow], writer: W) -> Result<(), BenchError> {
    if rows.is_empty() {
        return Err(BenchError::Contract(
            "refusing to emit a CSV with no measurement rows".into(),
        ));
    }
    let mut w = csv::Writer::from_writer(writer);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| BenchError::Io(e.to_string()))?;
    Ok(())
}

pub fn emit_csv_string(rows: &[BenchRow]) -> Result<String, BenchError> {
    let mut buf = Vec::new();
    emit_csv(rows, &mut buf)?;
    String::from_utf8(buf).map_err(|e| BenchError::Contract(e.to_string()))
}

pub fn parse_csv<R: Read>(reader: R) -> Result<Vec<BenchRow>, BenchError> {
    let mut r = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for record in r.deserialize() {
        rows.push(record?);
    }
    Ok(rows)
}

fn rebuild_counters(row: &BenchRow, element_size: u64) -> CostCounters {
    let mut c = CostCounters::new();
    c.matmul_flops = row.matmul_flops;
    c.nonmatmul_flops = row.nonmatmul_flops;
    c.hbm_reads = row.hbm_read_bytes / element_size;
    c.hbm_writes = row.hbm_write_bytes / element_size;
    c.sram_reads = row.sram_read_bytes / element_size;
    c.sram_writes = row.sram_write_bytes / element_size;
    c.blocks_computed = row.blocks_computed;
    c.blocks_skipped = row.blocks_skipped;
    c
}

/// Renders a plain-text comparison of a sweep's rows: method speedups at
/// matched shapes, the causal-masking work reduction where both variants
/// are present, and modeled-versus-measured runtimes for every row.
pub fn compare_report(rows: &[BenchRow]) -> String {
    let model = CostModel::default();
    let mut out = String::new();
    let mut pairs = 0;

    out.push_str("== speedups ==\n");
    for flash in rows.iter().filter(|r| r.method == "flash") {
        let naive = rows.iter().find(|r| {
            r.method == "naive"
                && r.seq_len == flash.seq_len
                && r.pass == flash.pass
                && r.causal == flash.causal
                && r.batch == flash.batch
        });
        if let Some(naive) = naive {
            pairs += 1;
            out.push_str(&format!(
                "seq_len {} {} (causal={}): flash {:.6}s vs naive {:.6}s, speedup {:.2}x\n",
                flash.seq_len,
                flash.pass,
                flash.causal,
                flash.wall_time_s,
                naive.wall_time_s,
                naive.wall_time_s / flash.wall_time_s
            ));
        }
    }
    if pairs == 0 {
        out.push_str("no comparable pairs\n");
    }

    let mut causal_lines = String::new();
    for masked in rows.iter().filter(|r| r.causal) {
        let unmasked = rows.iter().find(|r| {
            !r.causal
                && r.method == masked.method
                && r.seq_len == masked.seq_len
                && r.pass == masked.pass
                && r.batch == masked.batch
        });
        if let Some(unmasked) = unmasked {
            causal_lines.push_str(&format!(
                "{} seq_len {} {}: matmul ratio {:.4} (expect about 0.5 plus a diagonal term \
                 that shrinks with block count), wall ratio {:.2}\n",
                masked.method,
                masked.seq_len,
                masked.pass,
                masked.matmul_flops as f64 / unmasked.matmul_flops as f64,
                masked.wall_time_s / unmasked.wall_time_s
            ));
        }
    }
    if !causal_lines.is_empty() {
        out.push_str("== causal masking ==\n");
        out.push_str(&causal_lines);
    }

    out.push_str("== modeled roofline ==\n");
    for row in rows {
        let counters = rebuild_counters(row, model.element_size);
        let (predicted, bound) = predict_runtime(&counters, &model);
        out.push_str(&format!(
            "{} seq_len {} {}: predicted {:.3e}s ({bound:?}-bound under the device model), \
             measured {:.3e}s\n",
            row.method, row.seq_len, row.pass, predicted, row.wall_time_s
        ));
    }

    if rows.iter().any(|r| r.pass != "fwd") {
        out.push_str(
            "note: backward model FLOPs follow the 2.5x-forward convention \
             (five block matmuls against the forward pass's two).\n",
        );
    }
    out
}
