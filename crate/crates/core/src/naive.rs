//! Reference attention: materializes the full score and probability
//! matrices and runs everything in f64, independent of the configured
//! accumulator precision. Slow and memory-hungry by design; this is the
//! oracle the tiled kernels are validated against.

use crate::config::{AttentionConfig, MaskedRowPolicy};
use crate::error::{Error, Result};
use crate::instrument::CostCounters;
use crate::matrix::{matmul, matmul_at, Matrix, RowVector};

/// Forward artifacts of the reference path. `scores` holds the scaled,
/// mask-applied logits; `probs` the row-softmax of `scores`.
#[derive(Debug, Clone)]
pub struct NaiveForwardResult {
    pub output: Matrix,
    pub scores: Matrix,
    pub probs: Matrix,
}

/// Row softmax with max subtraction, in f64. Masked (`-inf`) entries map to
/// exact zeros. Rows with no unmasked entry yield all zeros.
pub fn softmax_rows(s: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let row = s.row(r);
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            continue;
        }
        let out_row = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &x) in out_row.iter_mut().zip(row) {
            let e = (x - mx).exp();
            *o = e;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// Row softmax computed in f32 *without* max subtraction.
///
/// Exists to demonstrate why a running maximum is tracked at all: logits in
/// the low hundreds overflow `exp` at this precision and poison the row
/// with infinities and NaNs, while the shifted softmax and the tiled
/// kernels stay finite on the same input.
pub fn softmax_rows_unshifted_f32(s: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(s.rows(), s.cols());
    for r in 0..s.rows() {
        let row = s.row(r);
        let mut sum = 0.0f32;
        let out_row = out.row_mut(r);
        for (o, &x) in out_row.iter_mut().zip(row) {
            let e = (x as f32).exp();
            *o = e as f64;
            sum += e;
        }
        for o in out_row.iter_mut() {
            *o = (*o as f32 / sum) as f64;
        }
    }
    out
}

/// Reference forward pass: `S = scale * Q K^T` (causally masked when
/// configured), `P = softmax(S)` row-wise, `O = P V`.
///
/// Counters record the three-phase interface traffic of the standard
/// implementation: the score and probability matrices are written to and
/// re-read from main memory at `seq_len^2` elements a piece, which is
/// exactly the traffic the tiled kernels exist to avoid.
pub fn attention_forward_naive(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<NaiveForwardResult> {
    cfg.validate()?;
    cfg.check_shape(q, "Q")?;
    cfg.check_shape(k, "K")?;
    cfg.check_shape(v, "V")?;
    let n = cfg.seq_len as u64;
    let d = cfg.head_dim as u64;

    // Phase 1: scores.
    counters.read_interface(2 * n * d);
    let mut scores = matmul(q, k, true, counters)?;
    for r in 0..cfg.seq_len {
        let row = scores.row_mut(r);
        for (c, s) in row.iter_mut().enumerate() {
            *s *= cfg.softmax_scale;
            if cfg.causal && c > r {
                *s = f64::NEG_INFINITY;
            }
        }
    }
    counters.nonmatmul_flops += n * n;
    counters.write_interface(n * n);

    // Phase 2: row softmax.
    counters.read_interface(n * n);
    let probs = softmax_rows(&scores);
    for r in 0..cfg.seq_len {
        let fully_masked = scores
            .row(r)
            .iter()
            .all(|&s| s == f64::NEG_INFINITY);
        if fully_masked && cfg.masked_row_policy == MaskedRowPolicy::Error {
            return Err(Error::FullyMaskedRow { row: r });
        }
    }
    // max scan, subtract, exp, sum, divide: five scalar ops per score.
    counters.nonmatmul_flops += 5 * n * n;
    counters.write_interface(n * n);

    // Phase 3: output.
    counters.read_interface(n * n + n * d);
    let output = matmul(&probs, v, false, counters)?;
    counters.write_interface(n * d);

    Ok(NaiveForwardResult {
        output,
        scores,
        probs,
    })
}

/// Gradient of a single softmax row: `ds = (diag(p) - p p^T) dp`, i.e.
/// `ds[j] = p[j] * (dp[j] - sum_k p[k] dp[k])`.
pub fn softmax_backward_row(p: &RowVector, dp: &RowVector) -> Result<RowVector> {
    if p.len() != dp.len() {
        return Err(Error::Dimension(format!(
            "softmax_backward_row length mismatch: {} vs {}",
            p.len(),
            dp.len()
        )));
    }
    if p.is_empty() {
        return Err(Error::Dimension("softmax_backward_row on empty row".into()));
    }
    let inner: f64 = p
        .as_slice()
        .iter()
        .zip(dp.as_slice())
        .map(|(a, b)| a * b)
        .sum();
    let mut out = RowVector::zeros(p.len());
    for j in 0..p.len() {
        out.set(j, p.get(j) * (dp.get(j) - inner));
    }
    Ok(out)
}

/// Reference backward pass from the materialized probability matrix.
///
/// `dV = P^T dO`, `dP = dO V^T`, per-row softmax backward gives the score
/// gradient, and `dQ = dS K`, `dK = dS^T Q`, where `dS` carries the softmax
/// scale. Masked positions have exact zero probabilities and therefore
/// contribute exact zeros to every gradient.
pub fn attention_backward_naive(
    q: &Matrix,
    k: &Matrix,
    v: &Matrix,
    probs: &Matrix,
    d_out: &Matrix,
    cfg: &AttentionConfig,
    counters: &mut CostCounters,
) -> Result<(Matrix, Matrix, Matrix)> {
    cfg.validate()?;
    cfg.check_shape(q, "Q")?;
    cfg.check_shape(k, "K")?;
    cfg.check_shape(v, "V")?;
    cfg.check_shape(d_out, "dO")?;
    if probs.rows() != cfg.seq_len || probs.cols() != cfg.seq_len {
        return Err(Error::Dimension(format!(
            "P must be {}x{}, got {}x{}",
            cfg.seq_len,
            cfg.seq_len,
            probs.rows(),
            probs.cols()
        )));
    }
    let n = cfg.seq_len as u64;
    let d = cfg.head_dim as u64;

    counters.read_interface(n * n + n * d);
    let dv = matmul_at(probs, d_out, counters)?;
    counters.write_interface(n * d);

    counters.read_interface(n * d + n * d);
    let dp = matmul(d_out, v, true, counters)?;
    counters.write_interface(n * n);

    counters.read_interface(2 * n * n);
    let mut ds = Matrix::zeros(cfg.seq_len, cfg.seq_len);
    for r in 0..cfg.seq_len {
        let p_row = RowVector::from_vec(probs.row(r).to_vec());
        let dp_row = RowVector::from_vec(dp.row(r).to_vec());
        let g = softmax_backward_row(&p_row, &dp_row)?;
        for (c, out) in ds.row_mut(r).iter_mut().enumerate() {
            *out = g.get(c) * cfg.softmax_scale;
        }
    }
    // dot (mul+add), subtract, two multiplies per score.
    counters.nonmatmul_flops += 5 * n * n;
    counters.write_interface(n * n);

    counters.read_interface(n * n + n * d);
    let dq = matmul(&ds, k, false, counters)?;
    counters.write_interface(n * d);

    counters.read_interface(n * n + n * d);
    let dk = matmul_at(&ds, q, counters)?;
    counters.write_interface(n * d);

    Ok((dq, dk, dv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn cfg(n: usize, d: usize) -> AttentionConfig {
        AttentionConfig::new(n, d).unwrap()
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let mut counters = CostCounters::new();
        let q = Matrix::zeros(4, 2);
        let k = random_matrix(4, 2, 1);
        let v = random_matrix(4, 2, 2);
        let res = attention_forward_naive(&q, &k, &v, &cfg(4, 2), &mut counters).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert!((res.probs.get(r, c) - 0.25).abs() < 1e-15);
            }
        }
        for c in 0..2 {
            let mean = (0..4).map(|r| v.get(r, c)).sum::<f64>() / 4.0;
            for r in 0..4 {
                assert!((res.output.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_token_is_identity() {
        let mut counters = CostCounters::new();
        let q = random_matrix(1, 3, 3);
        let k = random_matrix(1, 3, 4);
        let v = random_matrix(1, 3, 5);
        let res = attention_forward_naive(&q, &k, &v, &cfg(1, 3), &mut counters).unwrap();
        assert_eq!(res.probs.get(0, 0), 1.0);
        for c in 0..3 {
            assert!((res.output.get(0, c) - v.get(0, c)).abs() < 1e-15);
        }
    }

    #[test]
    fn causal_first_row_attends_only_to_itself() {
        let mut counters = CostCounters::new();
        let q = random_matrix(8, 4, 6);
        let k = random_matrix(8, 4, 7);
        let v = random_matrix(8, 4, 8);
        let res =
            attention_forward_naive(&q, &k, &v, &cfg(8, 4).with_causal(true), &mut counters)
                .unwrap();
        for c in 0..4 {
            assert!((res.output.get(0, c) - v.get(0, c)).abs() < 1e-12);
        }
    }

    #[test]
    fn probs_are_row_stochastic_with_exact_causal_zeros() {
        let mut counters = CostCounters::new();
        let q = random_matrix(16, 8, 9);
        let k = random_matrix(16, 8, 10);
        let v = random_matrix(16, 8, 11);
        let res =
            attention_forward_naive(&q, &k, &v, &cfg(16, 8).with_causal(true), &mut counters)
                .unwrap();
        for r in 0..16 {
            let sum: f64 = res.probs.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-6, "row {r} sums to {sum}");
            for c in (r + 1)..16 {
                assert_eq!(res.probs.get(r, c), 0.0);
            }
        }
    }

    #[test]
    fn softmax_is_shift_invariant_per_row() {
        let s = random_matrix(6, 10, 12);
        let base = softmax_rows(&s);
        let mut shifted = s.clone();
        for x in shifted.row_mut(3).iter_mut() {
            *x += 17.25;
        }
        let moved = softmax_rows(&shifted);
        assert!(base.max_abs_diff(&moved).unwrap() < 1e-6);
    }

    #[test]
    fn softmax_backward_row_hand_values() {
        let p = RowVector::from_vec(vec![0.5, 0.5]);
        let dp = RowVector::from_vec(vec![1.0, 0.0]);
        let ds = softmax_backward_row(&p, &dp).unwrap();
        assert!((ds.get(0) - 0.25).abs() < 1e-15);
        assert!((ds.get(1) + 0.25).abs() < 1e-15);

        // Constant upstream gradient is in the softmax null space.
        let dp = RowVector::from_vec(vec![3.0, 3.0]);
        let ds = softmax_backward_row(&p, &dp).unwrap();
        assert_eq!(ds.as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn softmax_backward_row_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let logits: Vec<f64> = (0..16).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let dp_vals: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let softmax = |s: &[f64]| -> Vec<f64> {
            let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.iter().map(|e| e / sum).collect()
        };

        let p = RowVector::from_vec(softmax(&logits));
        let dp = RowVector::from_vec(dp_vals.clone());
        let analytic = softmax_backward_row(&p, &dp).unwrap();

        let h = 1e-6;
        for j in 0..16 {
            let mut plus = logits.clone();
            plus[j] += h;
            let mut minus = logits.clone();
            minus[j] -= h;
            let f = |s: &[f64]| -> f64 {
                softmax(s)
                    .iter()
                    .zip(&dp_vals)
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let fd = (f(&plus) - f(&minus)) / (2.0 * h);
            assert!(
                (analytic.get(j) - fd).abs() < 1e-5,
                "component {j}: analytic {} vs fd {fd}",
                analytic.get(j)
            );
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_gradients() {
        let mut counters = CostCounters::new();
        let cfg = cfg(8, 4);
        let q = random_matrix(8, 4, 20);
        let k = random_matrix(8, 4, 21);
        let v = random_matrix(8, 4, 22);
        let fwd = attention_forward_naive(&q, &k, &v, &cfg, &mut counters).unwrap();
        let d_out = Matrix::zeros(8, 4);
        let (dq, dk, dv) =
            attention_backward_naive(&q, &k, &v, &fwd.probs, &d_out, &cfg, &mut counters)
                .unwrap();
        assert_eq!(dq, Matrix::zeros(8, 4));
        assert_eq!(dk, Matrix::zeros(8, 4));
        assert_eq!(dv, Matrix::zeros(8, 4));
    }

    #[test]
    fn single_token_backward() {
        let mut counters = CostCounters::new();
        let cfg = cfg(1, 3);
        let q = random_matrix(1, 3, 23);
        let k = random_matrix(1, 3, 24);
        let v = random_matrix(1, 3, 25);
        let fwd = attention_forward_naive(&q, &k, &v, &cfg, &mut counters).unwrap();
        let d_out = random_matrix(1, 3, 26);
        let (dq, dk, dv) =
            attention_backward_naive(&q, &k, &v, &fwd.probs, &d_out, &cfg, &mut counters)
                .unwrap();
        // A one-token softmax is constant, so only V receives gradient.
        assert_eq!(dv, d_out);
        assert_eq!(dq, Matrix::zeros(1, 3));
        assert_eq!(dk, Matrix::zeros(1, 3));
    }

    /// Central-difference check of the full analytic backward: perturb every
    /// entry of Q, K, V and compare against d/dx sum(O * G).
    fn finite_difference_check(n: usize, d: usize, causal: bool, seed: u64, tol: f64) {
        let mut counters = CostCounters::new();
        let cfg = cfg(n, d).with_causal(causal);
        let q = random_matrix(n, d, seed);
        let k = random_matrix(n, d, seed + 1);
        let v = random_matrix(n, d, seed + 2);
        let g = random_matrix(n, d, seed + 3);

        let fwd = attention_forward_naive(&q, &k, &v, &cfg, &mut counters).unwrap();
        let mut d_out = Matrix::zeros(n, d);
        for r in 0..n {
            for c in 0..d {
                d_out.set(r, c, g.get(r, c));
            }
        }
        let (dq, dk, dv) =
            attention_backward_naive(&q, &k, &v, &fwd.probs, &d_out, &cfg, &mut counters)
                .unwrap();

        let loss = |q: &Matrix, k: &Matrix, v: &Matrix| -> f64 {
            let mut scratch = CostCounters::new();
            let out = attention_forward_naive(q, k, v, &cfg, &mut scratch)
                .unwrap()
                .output;
            (0..n)
                .flat_map(|r| (0..d).map(move |c| (r, c)))
                .map(|(r, c)| out.get(r, c) * g.get(r, c))
                .sum()
        };

        let h = 1e-5;
        let check = |analytic: &Matrix, which: usize| {
            for r in 0..n {
                for c in 0..d {
                    let mut qp = q.clone();
                    let mut kp = k.clone();
                    let mut vp = v.clone();
                    let (mut qm, mut km, mut vm) = (q.clone(), k.clone(), v.clone());
                    let (tp, tm) = match which {
                        0 => (qp.row_mut(r), qm.row_mut(r)),
                        1 => (kp.row_mut(r), km.row_mut(r)),
                        _ => (vp.row_mut(r), vm.row_mut(r)),
                    };
                    tp[c] += h;
                    tm[c] -= h;
                    let fd = (loss(&qp, &kp, &vp) - loss(&qm, &km, &vm)) / (2.0 * h);
                    let got = analytic.get(r, c);
                    assert!(
                        (got - fd).abs() < tol,
                        "operand {which} entry ({r},{c}): analytic {got} vs fd {fd}"
                    );
                }
            }
        };
        check(&dq, 0);
        check(&dk, 1);
        check(&dv, 2);
    }

    #[test]
    fn backward_matches_finite_differences_small() {
        finite_difference_check(4, 2, false, 30, 1e-4);
        finite_difference_check(4, 2, true, 33, 1e-4);
    }

    #[test]
    fn gradient_consistency_over_many_seeds() {
        // Random shapes within the small-problem envelope, many seeds.
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(9000 + seed);
            let n = rng.gen_range(1..=16);
            let d = rng.gen_range(1..=8);
            let causal = rng.gen_bool(0.5);
            finite_difference_check(n, d, causal, 40_000 + seed * 7, 1e-4);
        }
    }

    #[test]
    fn unshifted_f32_softmax_overflows_on_large_logits() {
        let s = Matrix::from_rows(vec![vec![300.0, 299.0, 1.0]]).unwrap();
        let bad = softmax_rows_unshifted_f32(&s);
        assert!(bad.data().iter().any(|x| !x.is_finite()));
        // The shifted softmax holds up on the same row.
        let good = softmax_rows(&s);
        assert!(good.data().iter().all(|x| x.is_finite()));
    }
}
