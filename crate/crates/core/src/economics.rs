//! Economic quantities: the differentiable computation cost, the
//! incentive-weighted loss, allocation metrics (Gini, entropy), FLOP
//! accounting, and activation-sparsity measurement.
//!
//! # FLOP accounting
//!
//! Counting conventions (per sequence of length N, config L layers, H
//! heads, model dim d, key dim d_k, FFN dim f, vocab V):
//!
//! - matrix multiply `[m×k]·[k×n]`: 2·m·k·n (2 FLOPs per multiply-accumulate)
//! - layer norm: 8 FLOPs per element (mean, centering, variance, scale/shift)
//! - softmax: 5 FLOPs per element (max, subtract, exp, sum, divide)
//! - bias add, residual add, ReLU, score scaling: 1 FLOP per element
//! - embedding lookup: 0
//!
//! Dense total = N·d (embedding add)
//! + L·(8Nd + 6·N·d·d_k·H + 2·N²·d_k·H + N²·H + 5·N²·H + 2·N²·d_k·H
//! + 2·N·d² + Nd + 8Nd + 2·N·d·f + Nf + Nf + 2·N·f·d + Nd + Nd)
//! + 8Nd + 2·N·d·V + N·V
//!
//! The effective count rescales exactly two terms by measured support:
//! the attention-value product (2·N²·d_k·H per layer) by the fraction of
//! attention entries > 0, and the second FFN multiply (2·N·f·d per layer)
//! by the fraction of post-ReLU activations above the sparsity threshold.

use crate::autodiff::{Element, Tape, VarId};
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, ModelConfig};
use serde::{Deserialize, Serialize};

/// Default threshold below which a post-ReLU activation counts as inactive.
pub const DEFAULT_SPARSITY_THRESHOLD: f64 = 1e-3;

/// How the attention part of the computation cost is measured.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionCostMode {
    /// L1 mass of post-softmax attention. Constant (rows sum to 1) and
    /// kept for fidelity; the tests pin down that it cannot train anything.
    LiteralL1,
    /// Row entropy in nats; sharpens attention when taxed.
    EntropySurrogate,
}

/// Weights and mode for the computation-cost term.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostConfig {
    pub alpha: f64,
    pub beta: f64,
    pub attention_cost_mode: AttentionCostMode,
    pub normalize_by_tokens: bool,
}

impl Default for CostConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            attention_cost_mode: AttentionCostMode::EntropySurrogate,
            normalize_by_tokens: true,
        }
    }
}

impl CostConfig {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 {
            return Err(Error::Config("cost alpha and beta must be >= 0".into()));
        }
        Ok(())
    }
}

// ── Differentiable cost ──────────────────────────────────────────────

/// Build the computation-cost scalar on the trace's source tape:
/// alpha·(attention term) + beta·Σ_l ‖post-ReLU FFN activations‖₁,
/// optionally divided by the token count.
pub fn computational_cost_on_tape<F: Element>(
    tape: &mut Tape<F>,
    trace: &ActivationTrace<F>,
    cost: &CostConfig,
) -> Result<VarId> {
    cost.validate()?;
    if trace.layers.is_empty() {
        return Err(Error::Config("computational cost of an empty trace".into()));
    }
    let mut attn_term: Option<VarId> = None;
    let mut ffn_term: Option<VarId> = None;
    for layer in &trace.layers {
        for head in &layer.attention {
            let term = match cost.attention_cost_mode {
                AttentionCostMode::LiteralL1 => tape.l1_norm(head.var),
                AttentionCostMode::EntropySurrogate => tape.row_entropy_sum(head.var)?,
            };
            attn_term = Some(match attn_term {
                Some(acc) => tape.add(acc, term)?,
                None => term,
            });
        }
        let l1 = tape.l1_norm(layer.ffn_post.var);
        ffn_term = Some(match ffn_term {
            Some(acc) => tape.add(acc, l1)?,
            None => l1,
        });
    }
    let attn = tape.scale(attn_term.expect("at least one layer"), F::from_f64(cost.alpha));
    let ffn = tape.scale(ffn_term.expect("at least one layer"), F::from_f64(cost.beta));
    let mut total = tape.add(attn, ffn)?;
    if cost.normalize_by_tokens {
        total = tape.scale(total, F::from_f64(1.0 / trace.seq_len as f64));
    }
    Ok(total)
}

/// Value-level twin of [`computational_cost_on_tape`], for evaluation
/// paths that never run backward.
pub fn computational_cost_value<F: Element>(
    trace: &ActivationTrace<F>,
    cost: &CostConfig,
) -> Result<f64> {
    cost.validate()?;
    if trace.layers.is_empty() {
        return Err(Error::Config("computational cost of an empty trace".into()));
    }
    let mut attn_term = 0.0;
    let mut ffn_term = 0.0;
    for layer in &trace.layers {
        for head in &layer.attention {
            match cost.attention_cost_mode {
                AttentionCostMode::LiteralL1 => {
                    attn_term += head.values.data().iter().map(|v| v.as_f64().abs()).sum::<f64>();
                }
                AttentionCostMode::EntropySurrogate => {
                    attn_term += head
                        .values
                        .data()
                        .iter()
                        .map(|v| {
                            let p = v.as_f64();
                            if p > 0.0 {
                                -p * p.ln()
                            } else {
                                0.0
                            }
                        })
                        .sum::<f64>();
                }
            }
        }
        ffn_term += layer
            .ffn_post
            .values
            .data()
            .iter()
            .map(|v| v.as_f64().abs())
            .sum::<f64>();
    }
    let mut total = cost.alpha * attn_term + cost.beta * ffn_term;
    if cost.normalize_by_tokens {
        total /= trace.seq_len as f64;
    }
    Ok(total)
}

/// L_total = L_task + lambda · C_comp, on the shared tape.
pub fn incentive_loss<F: Element>(
    tape: &mut Tape<F>,
    task_loss: VarId,
    cost: VarId,
    lambda: f64,
) -> Result<VarId> {
    if lambda < 0.0 {
        return Err(Error::Config("incentive lambda must be >= 0".into()));
    }
    let scaled = tape.scale(cost, F::from_f64(lambda));
    tape.add(task_loss, scaled)
}

// ── Allocation metrics ───────────────────────────────────────────────

/// Gini coefficient of a nonnegative weight vector, via the O(N log N)
/// sorted formulation. All-zero input is defined as 0.
pub fn gini(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Config("gini of an empty vector".into()));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Config("gini weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return Ok(0.0);
    }
    let n = weights.len();
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite weights"));
    // G = (2 Σ_i i·x_(i)) / (n Σ x) − (n+1)/n, ascending, 1-based i
    let weighted: f64 = sorted
        .iter()
        .enumerate()
        .map(|(i, &x)| (i + 1) as f64 * x)
        .sum();
    Ok((2.0 * weighted) / (n as f64 * total) - (n as f64 + 1.0) / n as f64)
}

/// Shannon entropy in bits of a probability vector (sums to 1 within
/// 1e-6), with 0·log 0 = 0.
pub fn attention_entropy(weights: &[f64]) -> Result<f64> {
    if weights.is_empty() {
        return Err(Error::Config("entropy of an empty vector".into()));
    }
    if weights.iter().any(|&w| w < 0.0 || !w.is_finite()) {
        return Err(Error::Config("entropy weights must be finite and >= 0".into()));
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-6 {
        return Err(Error::Config(format!(
            "entropy input sums to {total}, not 1 within 1e-6"
        )));
    }
    Ok(weights
        .iter()
        .filter(|&&w| w > 0.0)
        .map(|&w| -w * w.log2())
        .sum())
}

// ── FLOP accounting ──────────────────────────────────────────────────

fn dense_flops_terms(config: &ModelConfig, n: usize) -> (u64, u64, u64) {
    let (l, h, d, dk, f, v) = (
        config.num_layers as u64,
        config.num_heads as u64,
        config.model_dim as u64,
        config.key_dim as u64,
        config.ffn_dim as u64,
        config.vocab_size as u64,
    );
    let n = n as u64;
    let attn_value_term = l * h * 2 * n * n * dk;
    let ffn_second_term = l * 2 * n * f * d;
    let per_layer_rest = 8 * n * d
        + h * 3 * 2 * n * d * dk
        + h * 2 * n * n * dk
        + h * n * n
        + 5 * h * n * n
        + 2 * n * d * d
        + n * d
        + 8 * n * d
        + 2 * n * d * f
        + n * f
        + n * f
        + n * d
        + n * d;
    let rest = n * d + l * per_layer_rest + 8 * n * d + 2 * n * d * v + n * v;
    (rest, attn_value_term, ffn_second_term)
}

/// Dense and support-rescaled FLOP counts for one forward pass. Without a
/// trace the two are equal.
pub fn flops_estimate<F: Element>(
    config: &ModelConfig,
    n: usize,
    trace: Option<&ActivationTrace<F>>,
    threshold: f64,
) -> Result<(u64, u64)> {
    if n > config.max_seq_len {
        return Err(Error::IndexOutOfRange {
            what: "sequence length",
            index: n,
            bound: config.max_seq_len + 1,
        });
    }
    let (rest, attn_term, ffn_term) = dense_flops_terms(config, n);
    let dense = rest + attn_term + ffn_term;
    let effective = match trace {
        None => dense,
        Some(trace) => {
            let s_attn = attention_support_fraction(trace);
            let s_ffn = 1.0 - sparsity_fraction(trace, threshold)?;
            let eff =
                rest as f64 + attn_term as f64 * s_attn + ffn_term as f64 * s_ffn;
            eff.round() as u64
        }
    };
    Ok((dense, effective))
}

/// Fraction of attention entries strictly above zero, pooled over every
/// head and layer (denominator N² per matrix).
pub fn attention_support_fraction<F: Element>(trace: &ActivationTrace<F>) -> f64 {
    let mut nonzero = 0usize;
    let mut total = 0usize;
    for m in trace.attention_matrices() {
        nonzero += m.values.data().iter().filter(|&&p| p > F::zero()).count();
        total += m.values.len();
    }
    if total == 0 {
        1.0
    } else {
        nonzero as f64 / total as f64
    }
}

/// Fraction of post-ReLU FFN activations at or below `threshold`, pooled
/// over all layers and tokens.
pub fn sparsity_fraction<F: Element>(trace: &ActivationTrace<F>, threshold: f64) -> Result<f64> {
    if threshold < 0.0 {
        return Err(Error::Config("sparsity threshold must be >= 0".into()));
    }
    let thr = F::from_f64(threshold);
    let mut inactive = 0usize;
    let mut total = 0usize;
    for layer in &trace.layers {
        inactive += layer
            .ffn_post
            .values
            .data()
            .iter()
            .filter(|&&v| v <= thr)
            .count();
        total += layer.ffn_post.values.len();
    }
    if total == 0 {
        Ok(0.0)
    } else {
        Ok(inactive as f64 / total as f64)
    }
}

// ── Aggregation ──────────────────────────────────────────────────────

/// Scalar allocation metrics for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EconomicMetrics {
    pub mean_gini: f64,
    pub mean_entropy_bits: f64,
    pub flops_dense: u64,
    pub flops_effective: u64,
    pub ffn_sparsity_fraction: f64,
    pub attention_support_fraction: f64,
}

/// Per-row Gini and entropy over one trace, averaged uniformly across
/// rows of every head and layer. Each attention row is measured over its
/// causally visible prefix (positions 0..=t for row t).
fn trace_row_metrics<F: Element>(trace: &ActivationTrace<F>) -> Result<(f64, f64)> {
    let mut gini_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut rows = 0usize;
    for m in trace.attention_matrices() {
        let n = m.values.shape()[1];
        for r in 0..m.values.shape()[0] {
            let prefix: Vec<f64> = m.values.data()[r * n..r * n + r + 1]
                .iter()
                .map(|v| v.as_f64())
                .collect();
            gini_sum += gini(&prefix)?;
            entropy_sum += attention_entropy(&prefix)?;
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(Error::Config("trace has no attention rows".into()));
    }
    Ok((gini_sum / rows as f64, entropy_sum / rows as f64))
}

/// Aggregate metrics over a set of traces: per-trace means averaged
/// uniformly, FLOPs and support fractions as means.
pub fn aggregate_metrics<F: Element>(
    config: &ModelConfig,
    traces: &[ActivationTrace<F>],
    threshold: f64,
) -> Result<EconomicMetrics> {
    if traces.is_empty() {
        return Err(Error::Config("aggregate_metrics needs at least one trace".into()));
    }
    let mut gini_sum = 0.0;
    let mut entropy_sum = 0.0;
    let mut sparsity_sum = 0.0;
    let mut support_sum = 0.0;
    let mut dense_sum = 0.0;
    let mut effective_sum = 0.0;
    for trace in traces {
        let (g, e) = trace_row_metrics(trace)?;
        gini_sum += g;
        entropy_sum += e;
        sparsity_sum += sparsity_fraction(trace, threshold)?;
        support_sum += attention_support_fraction(trace);
        let (dense, effective) = flops_estimate(config, trace.seq_len, Some(trace), threshold)?;
        dense_sum += dense as f64;
        effective_sum += effective as f64;
    }
    let k = traces.len() as f64;
    Ok(EconomicMetrics {
        mean_gini: gini_sum / k,
        mean_entropy_bits: entropy_sum / k,
        flops_dense: (dense_sum / k).round() as u64,
        flops_effective: (effective_sum / k).round() as u64,
        ffn_sparsity_fraction: sparsity_sum / k,
        attention_support_fraction: support_sum / k,
    })
}

/// One experiment point: configuration snapshot, task metrics, economic
/// metrics, and informational latency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    /// Series tag: `dense`, `incentive`, `posthoc_mask`, `budget`, `single`.
    pub provenance: String,
    pub lambda: f64,
    pub constraint: String,
    pub seed: u64,
    /// Cost weighting the run trained with (ablations zero one side).
    pub cost: CostConfig,
    /// Checksum of the parameters the run started from.
    pub init_checksum: u64,
    pub task_loss: f64,
    pub perplexity: f64,
    pub accuracy: Option<f64>,
    pub metrics: EconomicMetrics,
    /// Median single-sequence forward time; informational, never compared.
    pub latency_ms: f64,
    /// Per-head attention snapshot of one sequence, for heatmap rendering.
    pub sample_attention: Option<Vec<AttentionDump>>,
}

impl RunResult {
    /// Budget k when the constraint is top-k masking.
    pub fn budget_k(&self) -> Option<usize> {
        self.constraint
            .strip_prefix("top_k:")
            .and_then(|k| k.parse().ok())
    }
}

/// One head's post-softmax attention for a single sequence, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionDump {
    pub layer: usize,
    pub head: usize,
    pub seq_len: usize,
    pub probs: Vec<f64>,
}

pub fn dump_attention<F: Element>(trace: &ActivationTrace<F>) -> Vec<AttentionDump> {
    let mut out = Vec::new();
    for (l, layer) in trace.layers.iter().enumerate() {
        for (h, head) in layer.attention.iter().enumerate() {
            out.push(AttentionDump {
                layer: l,
                head: h,
                seq_len: trace.seq_len,
                probs: head.values.to_f64_vec(),
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Tape, Tensor};
    use crate::model::{LayerTrace, TraceMatrix};
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tens(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_vec(shape.to_vec(), data.to_vec()).unwrap()
    }

    /// Value-only trace; var ids are placeholders.
    fn synthetic_trace(
        attn: Vec<Vec<Tensor<f64>>>,
        ffn_post: Vec<Tensor<f64>>,
        seq_len: usize,
    ) -> ActivationTrace<f64> {
        let layers = attn
            .into_iter()
            .zip(ffn_post)
            .map(|(heads, post)| LayerTrace {
                attention: heads
                    .into_iter()
                    .map(|values| TraceMatrix { values, var: 0 })
                    .collect(),
                ffn_pre: TraceMatrix {
                    values: Tensor::zeros(post.shape().to_vec()),
                    var: 0,
                },
                ffn_post: TraceMatrix { values: post, var: 0 },
            })
            .collect();
        ActivationTrace { seq_len, layers }
    }

    fn uniform_causal_attention(n: usize) -> Tensor<f64> {
        let mut data = vec![0.0; n * n];
        for r in 0..n {
            for j in 0..=r {
                data[r * n + j] = 1.0 / (r + 1) as f64;
            }
        }
        tens(&[n, n], &data)
    }

    fn one_hot_attention(n: usize) -> Tensor<f64> {
        let mut data = vec![0.0; n * n];
        for r in 0..n {
            data[r * n + r] = 1.0;
        }
        tens(&[n, n], &data)
    }

    // ── gini ─────────────────────────────────────────────────────

    #[test]
    fn gini_uniform_is_zero() {
        for n in [1, 4, 17] {
            for level in [0.25, 1.0, 3.5] {
                let w = vec![level; n];
                assert!(gini(&w).unwrap().abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gini_one_hot_is_n_minus_one_over_n() {
        for n in [2, 4, 10] {
            let mut w = vec![0.0; n];
            w[n / 2] = 2.0;
            let expected = (n as f64 - 1.0) / n as f64;
            assert!((gini(&w).unwrap() - expected).abs() < 1e-12);
        }
        let w = [0.0, 0.0, 1.0, 0.0];
        assert!((gini(&w).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gini_sorted_matches_double_sum_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let w: Vec<f64> = (0..16)
                .map(|_| {
                    let z: f64 = crate::autodiff::sample_standard_normal(&mut rng);
                    z.abs()
                })
                .collect();
            let fast = gini(&w).unwrap();
            let n = w.len() as f64;
            let total: f64 = w.iter().sum();
            let double_sum: f64 = w
                .iter()
                .flat_map(|&a| w.iter().map(move |&b| (a - b).abs()))
                .sum();
            let oracle = double_sum / (2.0 * n * total);
            assert!((fast - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn gini_degenerate_and_invalid_inputs() {
        assert_eq!(gini(&[0.0, 0.0, 0.0]).unwrap(), 0.0);
        assert!(gini(&[]).is_err());
        assert!(gini(&[1.0, -0.5]).is_err());
    }

    #[test]
    fn gini_scale_invariance() {
        let w = [0.1, 0.4, 0.2, 0.3];
        let base = gini(&w).unwrap();
        for c in [0.01, 7.0, 1e6] {
            let scaled: Vec<f64> = w.iter().map(|&x| c * x).collect();
            assert!((gini(&scaled).unwrap() - base).abs() < 1e-12);
        }
    }

    // ── entropy ──────────────────────────────────────────────────

    #[test]
    fn entropy_anchors() {
        let uniform8 = vec![0.125; 8];
        assert!((attention_entropy(&uniform8).unwrap() - 3.0).abs() < 1e-12);

        let one_hot = [0.0, 1.0, 0.0];
        assert_eq!(attention_entropy(&one_hot).unwrap(), 0.0);

        let mixed = [0.5, 0.25, 0.25];
        assert!((attention_entropy(&mixed).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn entropy_rejects_unnormalized() {
        assert!(attention_entropy(&[0.5, 0.6]).is_err());
        assert!(attention_entropy(&[0.5, -0.5, 1.0]).is_err());
    }

    #[test]
    fn entropy_permutation_invariant_and_bounded() {
        let w = [0.45, 0.3, 0.2, 0.05];
        let p = [0.05, 0.2, 0.3, 0.45];
        assert!((attention_entropy(&w).unwrap() - attention_entropy(&p).unwrap()).abs() < 1e-15);
        let h = attention_entropy(&w).unwrap();
        assert!((0.0..=2.0).contains(&h));
    }

    // ── cost ─────────────────────────────────────────────────────

    #[test]
    fn literal_attention_cost_is_l_h_n() {
        // rows sum to 1, so the L1 attention mass is exactly L·H·N
        let n = 6;
        let (l, h) = (2, 3);
        let attn: Vec<Vec<Tensor<f64>>> = (0..l)
            .map(|_| (0..h).map(|_| uniform_causal_attention(n)).collect())
            .collect();
        let ffn: Vec<Tensor<f64>> = (0..l).map(|_| Tensor::zeros(vec![n, 4])).collect();
        let trace = synthetic_trace(attn, ffn, n);
        let cfg = CostConfig {
            alpha: 1.5,
            beta: 1.0,
            attention_cost_mode: AttentionCostMode::LiteralL1,
            normalize_by_tokens: false,
        };
        let cost = computational_cost_value(&trace, &cfg).unwrap();
        let expected = 1.5 * (l * h * n) as f64;
        assert!((cost - expected).abs() < 1e-9, "{cost} vs {expected}");
    }

    #[test]
    fn ffn_cost_of_constant_activations() {
        let n = 4;
        let (l, d_ff, c) = (2usize, 8usize, 0.37);
        let attn: Vec<Vec<Tensor<f64>>> =
            (0..l).map(|_| vec![one_hot_attention(n)]).collect();
        let ffn: Vec<Tensor<f64>> = (0..l)
            .map(|_| Tensor::filled(vec![n, d_ff], c).unwrap())
            .collect();
        let trace = synthetic_trace(attn, ffn, n);
        let cfg = CostConfig {
            alpha: 0.0,
            beta: 2.0,
            attention_cost_mode: AttentionCostMode::LiteralL1,
            normalize_by_tokens: false,
        };
        let cost = computational_cost_value(&trace, &cfg).unwrap();
        let expected = 2.0 * (l * n * d_ff) as f64 * c;
        assert!((cost - expected).abs() < 1e-9);
    }

    #[test]
    fn cost_linearity_in_alpha_beta() {
        let n = 5;
        let attn = vec![vec![uniform_causal_attention(n), one_hot_attention(n)]];
        let ffn = vec![Tensor::filled(vec![n, 3], 0.8).unwrap()];
        let trace = synthetic_trace(attn, ffn, n);
        for mode in [AttentionCostMode::LiteralL1, AttentionCostMode::EntropySurrogate] {
            let make = |alpha: f64, beta: f64| CostConfig {
                alpha,
                beta,
                attention_cost_mode: mode,
                normalize_by_tokens: true,
            };
            let combined = computational_cost_value(&trace, &make(0.7, 1.3)).unwrap();
            let a_only = computational_cost_value(&trace, &make(1.0, 0.0)).unwrap();
            let b_only = computational_cost_value(&trace, &make(0.0, 1.0)).unwrap();
            assert!((combined - (0.7 * a_only + 1.3 * b_only)).abs() < 1e-12);
        }
    }

    #[test]
    fn tape_and_value_costs_agree() {
        let mut tape = Tape::new();
        let scores = tape.leaf(&tens(&[3, 3], &[0.2, -0.4, 0.9, 1.2, 0.1, -0.3, 0.5, 0.5, 0.0]));
        let attn = tape.softmax_rows(scores).unwrap();
        let pre = tape.leaf(&tens(&[3, 4], &[-0.5, 0.2, 0.9, -1.2, 0.4, 0.0, 1.5, -0.7, 0.3, 0.6, -0.1, 0.8]));
        let post = tape.relu(pre);
        let trace = ActivationTrace {
            seq_len: 3,
            layers: vec![LayerTrace {
                attention: vec![TraceMatrix {
                    values: tape.value_tensor(attn),
                    var: attn,
                }],
                ffn_pre: TraceMatrix {
                    values: tape.value_tensor(pre),
                    var: pre,
                },
                ffn_post: TraceMatrix {
                    values: tape.value_tensor(post),
                    var: post,
                },
            }],
        };
        for mode in [AttentionCostMode::LiteralL1, AttentionCostMode::EntropySurrogate] {
            let cfg = CostConfig {
                alpha: 1.0,
                beta: 1.0,
                attention_cost_mode: mode,
                normalize_by_tokens: true,
            };
            let on_tape = computational_cost_on_tape(&mut tape, &trace, &cfg).unwrap();
            let by_value = computational_cost_value(&trace, &cfg).unwrap();
            assert!((tape.scalar_value(on_tape) - by_value).abs() < 1e-12);
        }
    }

    #[test]
    fn cost_gradient_matches_finite_differences() {
        // d(cost)/d(ffn pre-activation) via the relu path
        let base = [0.6, -0.8, 0.3, 1.1, -0.2, 0.9];
        let cfg = CostConfig {
            alpha: 0.0,
            beta: 1.0,
            attention_cost_mode: AttentionCostMode::LiteralL1,
            normalize_by_tokens: false,
        };
        let eval = |vals: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let pre = tape.leaf(&tens(&[2, 3], vals));
            let post = tape.relu(pre);
            let trace = ActivationTrace {
                seq_len: 2,
                layers: vec![LayerTrace {
                    attention: vec![TraceMatrix {
                        values: one_hot_attention(2),
                        var: pre, // unused at alpha = 0
                    }],
                    ffn_pre: TraceMatrix {
                        values: tape.value_tensor(pre),
                        var: pre,
                    },
                    ffn_post: TraceMatrix {
                        values: tape.value_tensor(post),
                        var: post,
                    },
                }],
            };
            let cost = computational_cost_on_tape(&mut tape, &trace, &cfg).unwrap();
            tape.scalar_value(cost)
        };

        // analytic
        let mut tape = Tape::new();
        let pre = tape.leaf(&tens(&[2, 3], &base).with_grad());
        let post = tape.relu(pre);
        let trace = ActivationTrace {
            seq_len: 2,
            layers: vec![LayerTrace {
                attention: vec![TraceMatrix {
                    values: one_hot_attention(2),
                    var: pre,
                }],
                ffn_pre: TraceMatrix {
                    values: tape.value_tensor(pre),
                    var: pre,
                },
                ffn_post: TraceMatrix {
                    values: tape.value_tensor(post),
                    var: post,
                },
            }],
        };
        let cost = computational_cost_on_tape(&mut tape, &trace, &cfg).unwrap();
        tape.backward(cost).unwrap();
        let analytic = tape.grad(pre).unwrap().to_vec();

        let h = 1e-5;
        for i in 0..base.len() {
            let mut plus = base;
            plus[i] += h;
            let mut minus = base;
            minus[i] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let err = (analytic[i] - fd).abs() / analytic[i].abs().max(fd.abs()).max(1e-6);
            assert!(err < 1e-4, "index {i}: analytic {} fd {fd}", analytic[i]);
        }
    }

    #[test]
    fn incentive_loss_composition() {
        let mut tape = Tape::new();
        let task = tape.leaf(&Tensor::scalar(2.0));
        let cost = tape.leaf(&Tensor::scalar(3.0));
        let at_zero = incentive_loss(&mut tape, task, cost, 0.0).unwrap();
        assert_eq!(tape.scalar_value(at_zero), 2.0);
        let at_one = incentive_loss(&mut tape, task, cost, 1.0).unwrap();
        assert_eq!(tape.scalar_value(at_one), 5.0);
        assert!(incentive_loss(&mut tape, task, cost, -0.1).is_err());
    }

    #[test]
    fn incentive_gradient_is_linear_combination() {
        // total = task(x) + λ·cost(x) with task = sum(x²), cost = |x|₁
        let vals = [0.7, -1.3, 2.1];
        let lambda = 0.37;
        let grads = |with_task: bool, with_cost: bool, lam: f64| -> Vec<f64> {
            let mut tape = Tape::new();
            let x = tape.leaf(&tens(&[3], &vals).with_grad());
            let sq = tape.mul(x, x).unwrap();
            let task = tape.sum(sq);
            let cost = tape.l1_norm(x);
            let loss = match (with_task, with_cost) {
                (true, true) => incentive_loss(&mut tape, task, cost, lam).unwrap(),
                (true, false) => task,
                (false, true) => cost,
                _ => unreachable!(),
            };
            tape.backward(loss).unwrap();
            tape.grad(x).unwrap().to_vec()
        };
        let combined = grads(true, true, lambda);
        let task_only = grads(true, false, 0.0);
        let cost_only = grads(false, true, 0.0);
        for i in 0..3 {
            let expected = task_only[i] + lambda * cost_only[i];
            assert!((combined[i] - expected).abs() < 1e-12);
        }
    }

    // ── flops / sparsity ─────────────────────────────────────────

    fn desk_config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 64,
            key_dim: 32,
            ffn_dim: 128,
            vocab_size: 64,
            max_seq_len: 64,
            seed: 0,
        }
    }

    #[test]
    fn flops_without_trace_are_equal() {
        let (dense, effective) =
            flops_estimate::<f64>(&desk_config(), 32, None, 1e-3).unwrap();
        assert_eq!(dense, effective);
    }

    #[test]
    fn flops_dense_matches_hand_computed_closed_form() {
        // independently recomputed, term by term, for the desk config at N=64
        let n: u64 = 64;
        let (l, h, d, dk, f, v) = (2u64, 2u64, 64u64, 32u64, 128u64, 64u64);
        let embedding_add = n * d;
        let ln1 = 8 * n * d;
        let qkv = h * 3 * 2 * n * d * dk;
        let scores = h * 2 * n * n * dk;
        let score_scale = h * n * n;
        let softmax = 5 * h * n * n;
        let attn_value = h * 2 * n * n * dk;
        let out_proj = 2 * n * d * d;
        let resid1 = n * d;
        let ln2 = 8 * n * d;
        let ffn1 = 2 * n * d * f + n * f;
        let relu = n * f;
        let ffn2 = 2 * n * f * d;
        let bias2 = n * d;
        let resid2 = n * d;
        let per_layer = ln1 + qkv + scores + score_scale + softmax + attn_value + out_proj
            + resid1 + ln2 + ffn1 + relu + ffn2 + bias2 + resid2;
        let final_ln = 8 * n * d;
        let vocab_proj = 2 * n * d * v + n * v;
        let expected = embedding_add + l * per_layer + final_ln + vocab_proj;

        let (dense, _) = flops_estimate::<f64>(&desk_config(), 64, None, 1e-3).unwrap();
        assert_eq!(dense, expected);
    }

    #[test]
    fn one_hot_attention_scales_value_term_by_one_over_n() {
        let cfg = ModelConfig {
            num_layers: 1,
            num_heads: 1,
            model_dim: 8,
            key_dim: 8,
            ffn_dim: 4,
            vocab_size: 10,
            max_seq_len: 16,
            seed: 0,
        };
        let n = 8;
        // FFN fully active so only the attention term is rescaled
        let trace = synthetic_trace(
            vec![vec![one_hot_attention(n)]],
            vec![Tensor::filled(vec![n, 4], 1.0).unwrap()],
            n,
        );
        let (dense, effective) = flops_estimate(&cfg, n, Some(&trace), 1e-3).unwrap();
        let attn_value_term = 2 * (n as u64) * (n as u64) * 8; // L=H=1
        let expected = dense - attn_value_term + attn_value_term / n as u64;
        assert_eq!(effective, expected);
        assert!(effective <= dense);
    }

    #[test]
    fn sparsity_fraction_cases() {
        let n = 4;
        let attn = vec![vec![one_hot_attention(n)]];
        let zeros = synthetic_trace(attn.clone(), vec![Tensor::zeros(vec![n, 8])], n);
        assert_eq!(sparsity_fraction(&zeros, 1e-3).unwrap(), 1.0);

        let hot = synthetic_trace(attn.clone(), vec![Tensor::filled(vec![n, 8], 0.5).unwrap()], n);
        assert_eq!(sparsity_fraction(&hot, 1e-3).unwrap(), 0.0);

        // 12 of 32 entries below threshold
        let mut mixed = vec![0.5; n * 8];
        for v in mixed.iter_mut().take(12) {
            *v = 0.0;
        }
        let trace = synthetic_trace(attn, vec![tens(&[n, 8], &mixed)], n);
        assert_eq!(sparsity_fraction(&trace, 1e-3).unwrap(), 12.0 / 32.0);
        assert!(sparsity_fraction(&trace, -1.0).is_err());
    }

    // ── aggregation ──────────────────────────────────────────────

    #[test]
    fn aggregate_one_hot_trace_has_zero_entropy() {
        let n = 6;
        let cfg = desk_config();
        let trace = synthetic_trace(
            vec![vec![one_hot_attention(n)], vec![one_hot_attention(n)]],
            vec![Tensor::zeros(vec![n, 128]), Tensor::zeros(vec![n, 128])],
            n,
        );
        let m = aggregate_metrics(&cfg, &[trace], 1e-3).unwrap();
        assert_eq!(m.mean_entropy_bits, 0.0);
        assert_eq!(m.ffn_sparsity_fraction, 1.0);
    }

    #[test]
    fn aggregate_uniform_causal_entropy_is_mean_log2_prefix() {
        let n = 8;
        let cfg = desk_config();
        let trace = synthetic_trace(
            vec![vec![uniform_causal_attention(n)], vec![uniform_causal_attention(n)]],
            vec![Tensor::zeros(vec![n, 128]), Tensor::zeros(vec![n, 128])],
            n,
        );
        let m = aggregate_metrics(&cfg, &[trace], 1e-3).unwrap();
        let expected: f64 = (1..=n).map(|t| (t as f64).log2()).sum::<f64>() / n as f64;
        assert!((m.mean_entropy_bits - expected).abs() < 1e-12);
        assert!(m.mean_gini.abs() < 1e-12);
    }

    #[test]
    fn aggregate_of_two_traces_is_mean_of_per_trace_values() {
        let n = 5;
        let cfg = desk_config();
        let a = synthetic_trace(
            vec![vec![one_hot_attention(n)], vec![one_hot_attention(n)]],
            vec![Tensor::zeros(vec![n, 128]), Tensor::zeros(vec![n, 128])],
            n,
        );
        let b = synthetic_trace(
            vec![vec![uniform_causal_attention(n)], vec![uniform_causal_attention(n)]],
            vec![
                Tensor::filled(vec![n, 128], 1.0).unwrap(),
                Tensor::filled(vec![n, 128], 1.0).unwrap(),
            ],
            n,
        );
        let ma = aggregate_metrics(&cfg, std::slice::from_ref(&a), 1e-3).unwrap();
        let mb = aggregate_metrics(&cfg, std::slice::from_ref(&b), 1e-3).unwrap();
        let both = aggregate_metrics(&cfg, &[a, b], 1e-3).unwrap();
        assert!((both.mean_gini - 0.5 * (ma.mean_gini + mb.mean_gini)).abs() < 1e-12);
        assert!(
            (both.mean_entropy_bits - 0.5 * (ma.mean_entropy_bits + mb.mean_entropy_bits)).abs()
                < 1e-12
        );
        assert!(
            (both.ffn_sparsity_fraction
                - 0.5 * (ma.ffn_sparsity_fraction + mb.ffn_sparsity_fraction))
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn truncation_moves_entropy_down_and_gini_up() {
        // renormalized top-k truncations of a fixed positive row
        let row = [0.4, 0.25, 0.15, 0.12, 0.08];
        let mut prev_entropy = f64::INFINITY;
        let mut prev_gini = -1.0;
        for k in (1..=5).rev() {
            let mut sorted = row.to_vec();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            let kept: Vec<f64> = sorted[..k].to_vec();
            let sum: f64 = kept.iter().sum();
            let mut renorm = vec![0.0; 5];
            for (i, v) in kept.iter().enumerate() {
                renorm[i] = v / sum;
            }
            let h = attention_entropy(&renorm).unwrap();
            let g = gini(&renorm).unwrap();
            assert!(h <= prev_entropy + 1e-12);
            assert!(g >= prev_gini - 1e-12);
            prev_entropy = h;
            prev_gini = g;
        }
    }
}
