//! Inference-time resource constraints on attention.
//!
//! Three mechanisms: hard top-k masking of pre-softmax scores, a literal
//! uniform score penalty (kept, with tests documenting that softmax shift
//! invariance makes it a no-op), and a post-softmax probability threshold
//! that actually sparsifies. All of them are pure inference-time
//! transforms; none receives gradients.

use crate::autodiff::{Element, Tape, Tensor, VarId};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Score sentinel for masked positions. Large negative rather than -inf so
/// 32-bit arithmetic never produces NaN; softmax still yields exact zeros.
pub const MASK_SENTINEL: f64 = -1e9;

/// Which inference-time constraint is active.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
#[derive(Default)]
pub enum ConstraintSpec {
    #[default]
    None,
    TopK { budget_k: usize },
    PenaltyLiteral { lambda_sparse: f64 },
    PenaltyThreshold { lambda_sparse: f64 },
}


impl ConstraintSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::None => Ok(()),
            Self::TopK { budget_k } => {
                if budget_k < 1 {
                    Err(Error::Config("top_k budget_k must be >= 1".into()))
                } else {
                    Ok(())
                }
            }
            Self::PenaltyLiteral { lambda_sparse } => {
                if lambda_sparse < 0.0 {
                    Err(Error::Config("lambda_sparse must be >= 0".into()))
                } else {
                    Ok(())
                }
            }
            Self::PenaltyThreshold { lambda_sparse } => {
                if lambda_sparse < 0.0 {
                    Err(Error::Config("lambda_sparse must be >= 0".into()))
                } else if lambda_sparse >= 1.0 {
                    Err(Error::Config(
                        "threshold lambda_sparse must be < 1 (it is a probability cutoff)".into(),
                    ))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Short tag for reports.
    pub fn label(&self) -> String {
        match self {
            Self::None => "none".into(),
            Self::TopK { budget_k } => format!("top_k:{budget_k}"),
            Self::PenaltyLiteral { lambda_sparse } => format!("penalty_literal:{lambda_sparse}"),
            Self::PenaltyThreshold { lambda_sparse } => {
                format!("penalty_threshold:{lambda_sparse}")
            }
        }
    }
}

/// Per row of an N×N score matrix, select the k highest-scoring allowed
/// positions (ties broken toward the lower key index). Rows with at most
/// k allowed positions keep them all.
pub fn top_k_allowed<F: Element>(
    scores: &[F],
    n: usize,
    k: usize,
    allowed: &[bool],
) -> Result<Vec<bool>> {
    if k < 1 {
        return Err(Error::Config("top_k budget k must be >= 1".into()));
    }
    debug_assert_eq!(scores.len(), n * n);
    debug_assert_eq!(allowed.len(), n * n);
    let mut keep = vec![false; n * n];
    let mut candidates: Vec<usize> = Vec::with_capacity(n);
    for r in 0..n {
        let row = &scores[r * n..(r + 1) * n];
        candidates.clear();
        candidates.extend((0..n).filter(|&j| allowed[r * n + j]));
        if candidates.len() <= k {
            for &j in &candidates {
                keep[r * n + j] = true;
            }
            continue;
        }
        // descending by score, ascending index on ties
        candidates.sort_by(|&a, &b| {
            row[b].partial_cmp(&row[a])
                .expect("scores are finite")
                .then(a.cmp(&b))
        });
        for &j in &candidates[..k] {
            keep[r * n + j] = true;
        }
    }
    Ok(keep)
}

/// Sentinel-masking form of top-k: surviving scores pass through, all other
/// positions are set to `MASK_SENTINEL`. A row with at most k allowed
/// positions is returned unchanged.
pub fn top_k_mask<F: Element>(scores: &Tensor<F>, k: usize, allowed: &[bool]) -> Result<Tensor<F>> {
    let shape = scores.shape();
    if shape.len() != 2 || shape[0] != shape[1] {
        return Err(Error::ShapeMismatch {
            op: "top_k_mask",
            left: shape.to_vec(),
            right: vec![shape[0], shape[0]],
        });
    }
    let n = shape[0];
    let keep = top_k_allowed(scores.data(), n, k, allowed)?;
    let sentinel = F::from_f64(MASK_SENTINEL);
    let mut out = scores.data().to_vec();
    for r in 0..n {
        let allowed_count = (0..n).filter(|&j| allowed[r * n + j]).count();
        if allowed_count <= k {
            continue; // unchanged
        }
        for j in 0..n {
            if !keep[r * n + j] {
                out[r * n + j] = sentinel;
            }
        }
    }
    Tensor::from_vec(vec![n, n], out)
}

fn attention_scores<F: Element>(q: &Tensor<F>, k: &Tensor<F>) -> Result<(Vec<F>, usize)> {
    let (n, dk) = (q.shape()[0], q.shape()[1]);
    if k.shape() != q.shape() {
        return Err(Error::ShapeMismatch {
            op: "attention",
            left: q.shape().to_vec(),
            right: k.shape().to_vec(),
        });
    }
    let scale = F::from_f64(1.0 / (dk as f64).sqrt());
    let mut scores = vec![F::zero(); n * n];
    for i in 0..n {
        for j in 0..n {
            let mut acc = F::zero();
            for t in 0..dk {
                acc = acc + q.data()[i * dk + t] * k.data()[j * dk + t];
            }
            scores[i * n + j] = acc * scale;
        }
    }
    Ok((scores, n))
}

fn softmax_full<F: Element>(scores: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n * n];
    for r in 0..n {
        let row = &scores[r * n..(r + 1) * n];
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        let out_row = &mut out[r * n..(r + 1) * n];
        for j in 0..n {
            let e = (row[j] - max).exp();
            out_row[j] = e;
            sum = sum + e;
        }
        for v in out_row.iter_mut() {
            *v = *v / sum;
        }
    }
    out
}

fn attention_output<F: Element>(attn: &[F], v: &Tensor<F>, n: usize) -> Tensor<F> {
    let dv = v.shape()[1];
    let mut out = vec![F::zero(); n * dv];
    for i in 0..n {
        for j in 0..n {
            let a = attn[i * n + j];
            for t in 0..dv {
                out[i * dv + t] = out[i * dv + t] + a * v.data()[j * dv + t];
            }
        }
    }
    Tensor::from_vec(vec![n, dv], out).expect("finite attention output")
}

/// Attention with a uniform penalty subtracted from every pre-softmax
/// score: softmax(QK^T/sqrt(d_k) - lambda)V. Implemented exactly as
/// written; softmax shift invariance makes the output independent of
/// lambda, which the tests assert.
pub fn penalized_attention_literal<F: Element>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    lambda_sparse: f64,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if lambda_sparse < 0.0 {
        return Err(Error::Config("lambda_sparse must be >= 0".into()));
    }
    let (mut scores, n) = attention_scores(q, k)?;
    let shift = F::from_f64(lambda_sparse);
    for s in scores.iter_mut() {
        *s = *s - shift;
    }
    let attn = softmax_full(&scores, n);
    let out = attention_output(&attn, v, n);
    Ok((out, Tensor::from_vec(vec![n, n], attn)?))
}

/// Attention followed by a post-softmax probability threshold: entries
/// below `lambda_sparse` are zeroed and each row renormalized; a row whose
/// entries all fall below keeps its maximum (ties to the lower index).
pub fn penalized_attention_threshold<F: Element>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    lambda_sparse: f64,
) -> Result<(Tensor<F>, Tensor<F>)> {
    if !(0.0..1.0).contains(&lambda_sparse) {
        return Err(Error::Config(
            "threshold lambda_sparse must be in [0, 1)".into(),
        ));
    }
    let (scores, n) = attention_scores(q, k)?;
    let probs = softmax_full(&scores, n);
    let thresholded = threshold_renorm(&probs, n, lambda_sparse);
    let out = attention_output(&thresholded, v, n);
    Ok((out, Tensor::from_vec(vec![n, n], thresholded)?))
}

fn threshold_renorm<F: Element>(probs: &[F], n: usize, lambda: f64) -> Vec<F> {
    if lambda <= 0.0 {
        return probs.to_vec(); // exact identity, no renormalization drift
    }
    let thr = F::from_f64(lambda);
    let mut out = vec![F::zero(); n * n];
    for r in 0..n {
        let row = &probs[r * n..(r + 1) * n];
        let out_row = &mut out[r * n..(r + 1) * n];
        let mut sum = F::zero();
        for j in 0..n {
            if row[j] >= thr {
                out_row[j] = row[j];
                sum = sum + row[j];
            }
        }
        if sum == F::zero() {
            let mut best = 0;
            for j in 1..n {
                if row[j] > row[best] {
                    best = j;
                }
            }
            out_row[best] = F::one();
        } else {
            for v in out_row.iter_mut() {
                *v = *v / sum;
            }
        }
    }
    out
}

/// Dispatch a constraint over pre-softmax scores already on a tape.
/// Returns the post-softmax (and post-constraint) attention var. `allowed`
/// is the causally valid position set; every mode composes with it.
pub fn apply_constraint<F: Element>(
    tape: &mut Tape<F>,
    spec: &ConstraintSpec,
    scores: VarId,
    allowed: &[bool],
) -> Result<VarId> {
    spec.validate()?;
    match *spec {
        ConstraintSpec::None => tape.softmax_rows_masked(scores, allowed),
        ConstraintSpec::TopK { budget_k } => {
            let n = tape.shape(scores)[0];
            let keep = top_k_allowed(tape.value(scores), n, budget_k, allowed)?;
            tape.softmax_rows_masked(scores, &keep)
        }
        ConstraintSpec::PenaltyLiteral { lambda_sparse } => {
            let shifted = tape.add_scalar(scores, -F::from_f64(lambda_sparse));
            tape.softmax_rows_masked(shifted, allowed)
        }
        ConstraintSpec::PenaltyThreshold { lambda_sparse } => {
            let attn = tape.softmax_rows_masked(scores, allowed)?;
            tape.threshold_renorm_rows(attn, lambda_sparse)
        }
    }
}

/// Bisection over the probability threshold so that the mean per-row
/// support of the given attention matrices lands within one position of
/// `budget`. At most 20 iterations; returns the final midpoint otherwise.
pub fn threshold_for_budget<F: Element>(matrices: &[Tensor<F>], budget: f64) -> f64 {
    let mean_support = |lambda: f64| -> f64 {
        let mut rows = 0usize;
        let mut support = 0usize;
        for m in matrices {
            let n = m.shape()[1];
            let thr = F::from_f64(lambda);
            for row in m.data().chunks(n) {
                let kept = row.iter().filter(|&&p| p >= thr && p > F::zero()).count();
                support += kept.max(1); // fallback keeps one entry
                rows += 1;
            }
        }
        support as f64 / rows.max(1) as f64
    };
    if mean_support(0.0) <= budget + 1.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0f64, 1.0 - 1e-9);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..20 {
        mid = 0.5 * (lo + hi);
        let s = mean_support(mid);
        if (s - budget).abs() <= 1.0 {
            return mid;
        }
        if s > budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}
