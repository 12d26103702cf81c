//! Shared oracle helpers for the integration suites: central finite
//! differences and the end-to-end micro-model loss.
#![allow(dead_code)] // each test crate uses a different subset

use oikos::autodiff::{Tape, Tensor, VarId};
use oikos::constraints::ConstraintSpec;
use oikos::economics::{
    computational_cost_on_tape, incentive_loss, AttentionCostMode, CostConfig,
};
use oikos::model::{ModelConfig, TransformerModel};
use oikos::tasks::make_copy_task;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-8;

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    let u = (rng.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0);
    lo + u * (hi - lo)
}

pub fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| uniform(rng, -1.2, 1.2)).collect()
}

/// Random values bounded away from zero (the kink of relu/|.|).
pub fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let magnitude = uniform(rng, 1e-3 + 0.1, 1.5);
            if rng.next_u64().is_multiple_of(2) {
                magnitude
            } else {
                -magnitude
            }
        })
        .collect()
}

pub fn assert_grad_close(analytic: &[f64], numeric: &[f64], what: &str) {
    assert_eq!(analytic.len(), numeric.len());
    for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
        let err = (a - n).abs();
        let tol = REL_TOL * a.abs().max(n.abs()) + ABS_TOL;
        assert!(
            err <= tol,
            "{what}[{i}]: analytic {a} vs finite-diff {n} (err {err:.3e}, tol {tol:.3e})"
        );
    }
}

/// Check d(scalar f)/d(input) against central differences for every input.
pub fn gradcheck<F>(what: &str, shapes: &[Vec<usize>], values: &[Vec<f64>], f: F)
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> VarId,
{
    let mut tape = Tape::new();
    let leaves: Vec<VarId> = shapes
        .iter()
        .zip(values)
        .map(|(shape, vals)| {
            tape.leaf(
                &Tensor::from_vec(shape.clone(), vals.clone())
                    .unwrap()
                    .with_grad(),
            )
        })
        .collect();
    let out = f(&mut tape, &leaves);
    assert_eq!(tape.value(out).len(), 1, "{what}: gradcheck target must be scalar");
    tape.backward(out).unwrap();
    let analytic: Vec<Vec<f64>> = leaves.iter().map(|&l| tape.grad_or_zeros(l)).collect();

    for input_idx in 0..shapes.len() {
        let mut numeric = vec![0.0; values[input_idx].len()];
        for elem in 0..values[input_idx].len() {
            let eval = |delta: f64| -> f64 {
                let mut tape = Tape::new();
                let leaves: Vec<VarId> = shapes
                    .iter()
                    .zip(values)
                    .enumerate()
                    .map(|(i, (shape, vals))| {
                        let mut v = vals.clone();
                        if i == input_idx {
                            v[elem] += delta;
                        }
                        tape.leaf(&Tensor::from_vec(shape.clone(), v).unwrap())
                    })
                    .collect();
                let out = f(&mut tape, &leaves);
                tape.value(out)[0]
            };
            numeric[elem] = (eval(FD_STEP) - eval(-FD_STEP)) / (2.0 * FD_STEP);
        }
        assert_grad_close(
            &analytic[input_idx],
            &numeric,
            &format!("{what} input {input_idx}"),
        );
    }
}

fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    gradcheck(
        "matmul",
        &[vec![3, 3], vec![3, 3]],
        &[randn(&mut rng, 9), randn(&mut rng, 9)],
        |tape, leaves| {
            let c = tape.matmul(leaves[0], leaves[1]).unwrap();
            tape.sum(c)
        },
    );
}

fn transpose_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    gradcheck(
        "transpose2d",
        &[vec![2, 4], vec![4, 2]],
        &[randn(&mut rng, 8), randn(&mut rng, 8)],
        |tape, leaves| {
            let t = tape.transpose2d(leaves[0]).unwrap(); // 4x2
            let t2 = tape.transpose2d(leaves[1]).unwrap(); // 2x4
            let prod = tape.matmul(t, t2).unwrap(); // 4x4
            tape.sum(prod)
        },
    );
}

fn add_mul_scale_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    gradcheck(
        "add+mul+scale",
        &[vec![2, 3], vec![2, 3]],
        &[randn(&mut rng, 6), randn(&mut rng, 6)],
        |tape, leaves| {
            let sum = tape.add(leaves[0], leaves[1]).unwrap();
            let prod = tape.mul(sum, leaves[0]).unwrap();
            let scaled = tape.scale(prod, 0.37);
            let shifted = tape.add_scalar(scaled, 1.25);
            tape.sum(shifted)
        },
    );
}

fn bias_broadcast_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    gradcheck(
        "add_row_broadcast",
        &[vec![3, 4], vec![4]],
        &[randn(&mut rng, 12), randn(&mut rng, 4)],
        |tape, leaves| {
            let out = tape.add_row_broadcast(leaves[0], leaves[1]).unwrap();
            let sq = tape.mul(out, out).unwrap();
            tape.sum(sq)
        },
    );
}

fn relu_gradient_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    gradcheck(
        "relu",
        &[vec![3, 5]],
        &[away_from_zero(&mut rng, 15)],
        |tape, leaves| {
            let r = tape.relu(leaves[0]);
            let sq = tape.mul(r, r).unwrap();
            tape.sum(sq)
        },
    );
}

fn l1_norm_gradient_away_from_kink() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    gradcheck(
        "l1_norm",
        &[vec![8]],
        &[away_from_zero(&mut rng, 8)],
        |tape, leaves| tape.l1_norm(leaves[0]),
    );
}

fn softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    // weighted sum of softmax outputs so the gradient is non-trivial
    let weights = randn(&mut rng, 12);
    gradcheck(
        "softmax_rows",
        &[vec![3, 4]],
        &[randn(&mut rng, 12)],
        |tape, leaves| {
            let sm = tape.softmax_rows(leaves[0]).unwrap();
            let w = tape.constant(vec![3, 4], weights.clone()).unwrap();
            let weighted = tape.mul(sm, w).unwrap();
            tape.sum(weighted)
        },
    );
}

fn masked_softmax_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 4;
    let mask = oikos::model::causal_mask(n);
    let weights = randn(&mut rng, n * n);
    gradcheck(
        "softmax_rows_masked",
        &[vec![n, n]],
        &[randn(&mut rng, n * n)],
        |tape, leaves| {
            let sm = tape.softmax_rows_masked(leaves[0], &mask).unwrap();
            let w = tape.constant(vec![n, n], weights.clone()).unwrap();
            let weighted = tape.mul(sm, w).unwrap();
            tape.sum(weighted)
        },
    );
}

fn cross_entropy_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    gradcheck(
        "cross_entropy",
        &[vec![3, 5]],
        &[randn(&mut rng, 15)],
        |tape, leaves| {
            tape.cross_entropy(leaves[0], &[(0, 2), (1, 4), (2, 0)])
                .unwrap()
        },
    );
}

fn layer_norm_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    gradcheck(
        "layer_norm",
        &[vec![3, 6], vec![6], vec![6]],
        &[
            randn(&mut rng, 18),
            (0..6).map(|i| 0.5 + 0.2 * i as f64).collect(),
            randn(&mut rng, 6),
        ],
        |tape, leaves| {
            let ln = tape
                .layer_norm(leaves[0], leaves[1], leaves[2], 1e-5)
                .unwrap();
            let sq = tape.mul(ln, ln).unwrap();
            tape.sum(sq)
        },
    );
}

fn embedding_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    gradcheck(
        "embedding",
        &[vec![6, 3]],
        &[randn(&mut rng, 18)],
        |tape, leaves| {
            let rows = tape.embedding(leaves[0], &[0, 2, 2, 5]).unwrap();
            let sq = tape.mul(rows, rows).unwrap();
            tape.sum(sq)
        },
    );
}

fn concat_split_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    gradcheck(
        "concat_cols+slice_cols",
        &[vec![3, 2], vec![3, 3]],
        &[randn(&mut rng, 6), randn(&mut rng, 9)],
        |tape, leaves| {
            let cat = tape.concat_cols(&[leaves[0], leaves[1]]).unwrap(); // 3x5
            let middle = tape.slice_cols(cat, 1, 3).unwrap();
            let sq = tape.mul(middle, middle).unwrap();
            tape.sum(sq)
        },
    );
}

fn mean_sum_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    gradcheck(
        "mean+sum",
        &[vec![4, 4]],
        &[randn(&mut rng, 16)],
        |tape, leaves| {
            let sq = tape.mul(leaves[0], leaves[0]).unwrap();
            let m = tape.mean(sq);
            let s = tape.sum(leaves[0]);
            let combined = tape.add(m, s).unwrap();
            tape.scale(combined, 0.5)
        },
    );
}

fn row_entropy_gradient_on_positive_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    // feed softmax outputs so entries are strictly positive
    gradcheck(
        "row_entropy_sum",
        &[vec![3, 4]],
        &[randn(&mut rng, 12)],
        |tape, leaves| {
            let sm = tape.softmax_rows(leaves[0]).unwrap();
            tape.row_entropy_sum(sm).unwrap()
        },
    );
}

/// Finite-difference check of every differentiable operation.
pub fn op_gradcheck_suite() {
    matmul_gradient();
    transpose_gradient();
    add_mul_scale_gradients();
    bias_broadcast_gradient();
    relu_gradient_away_from_kink();
    l1_norm_gradient_away_from_kink();
    softmax_gradient();
    masked_softmax_gradient();
    cross_entropy_gradient();
    layer_norm_gradient();
    embedding_gradient();
    concat_split_gradient();
    mean_sum_reduction_gradients();
    row_entropy_gradient_on_positive_rows();
}

/// End-to-end gradient check on a generated recall example, at the
/// given incentive weights.
pub fn full_model_gradcheck(lambdas: &[f64]) {
    let (data, _) = make_copy_task(10, 32, 2, 1, 77).unwrap();
    let tokens = data.examples[0].tokens.clone();
    let targets: Vec<(usize, usize)> = match &data.examples[0].target {
        oikos::tasks::Target::Tokens(ts) => ts
            .iter()
            .enumerate()
            .filter_map(|(r, t)| t.map(|tok| (r, tok)))
            .collect(),
        _ => unreachable!(),
    };
    for &lambda in lambdas {
        check_full_model_gradient(lambda, &tokens, &targets);
    }
}
pub fn micro_model(seed: u64) -> TransformerModel<f64> {
    TransformerModel::init(ModelConfig {
        num_layers: 2,
        num_heads: 2,
        model_dim: 8,
        key_dim: 4,
        ffn_dim: 16,
        vocab_size: 32,
        max_seq_len: 12,
        seed,
    })
    .unwrap()
}

/// Total loss (task + lambda·cost) of a model on one example, plus a
/// fingerprint of which ReLU units are active. The loss is only
/// differentiable while that pattern is constant, so finite-difference
/// oracles skip stencils that cross a kink.
pub fn model_loss(
    model: &TransformerModel<f64>,
    tokens: &[usize],
    targets: &[(usize, usize)],
    lambda: f64,
) -> (f64, u64) {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model
        .forward(&mut tape, &bound, tokens, &ConstraintSpec::None, true)
        .unwrap();
    let task = tape.cross_entropy(out.logits, targets).unwrap();
    let trace = out.trace.unwrap();
    let mut pattern = 0xcbf2_9ce4_8422_2325u64;
    for layer in &trace.layers {
        for &v in layer.ffn_pre.values.data() {
            pattern ^= u64::from(v > 0.0);
            pattern = pattern.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    let cost_cfg = CostConfig {
        alpha: 1.0,
        beta: 1.0,
        attention_cost_mode: AttentionCostMode::EntropySurrogate,
        normalize_by_tokens: true,
    };
    let cost = computational_cost_on_tape(&mut tape, &trace, &cost_cfg).unwrap();
    let total = incentive_loss(&mut tape, task, cost, lambda).unwrap();
    (tape.scalar_value(total), pattern)
}

/// End-to-end model-gradient check against central finite differences at
/// the given lambda. Probes a deterministic subset of each tensor.
pub fn check_full_model_gradient(lambda: f64, tokens: &[usize], targets: &[(usize, usize)]) {
    let model = micro_model(123);

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let out = model
        .forward(&mut tape, &bound, tokens, &ConstraintSpec::None, true)
        .unwrap();
    let task = tape.cross_entropy(out.logits, targets).unwrap();
    let cost_cfg = CostConfig {
        alpha: 1.0,
        beta: 1.0,
        attention_cost_mode: AttentionCostMode::EntropySurrogate,
        normalize_by_tokens: true,
    };
    let cost = computational_cost_on_tape(&mut tape, &out.trace.as_ref().unwrap().clone(), &cost_cfg)
        .unwrap();
    let total = incentive_loss(&mut tape, task, cost, lambda).unwrap();
    tape.backward(total).unwrap();
    let ids = bound.ordered_ids();
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
    drop(tape);

    let (_, base_pattern) = model_loss(&model, tokens, targets, lambda);
    let names: Vec<String> = model.named_params().iter().map(|(n, _)| n.clone()).collect();
    let mut checked = 0usize;
    let mut skipped = 0usize;
    for (pi, name) in names.iter().enumerate() {
        let n_elems = analytic[pi].len();
        let stride = (n_elems / 24).max(1);
        for elem in (0..n_elems).step_by(stride) {
            let mut perturbed = model.clone();
            let mut eval = |delta: f64| -> (f64, u64) {
                {
                    let mut params = perturbed.params_mut();
                    params[pi].data_mut()[elem] += delta;
                }
                let v = model_loss(&perturbed, tokens, targets, lambda);
                {
                    let mut params = perturbed.params_mut();
                    params[pi].data_mut()[elem] -= delta;
                }
                v
            };
            let (plus, pattern_plus) = eval(FD_STEP);
            let (minus, pattern_minus) = eval(-FD_STEP);
            if pattern_plus != base_pattern || pattern_minus != base_pattern {
                skipped += 1;
                continue;
            }
            let fd = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pi][elem];
            let err = (a - fd).abs();
            let tol = REL_TOL * a.abs().max(fd.abs()) + ABS_TOL;
            assert!(
                err <= tol,
                "lambda {lambda}, {name}[{elem}]: analytic {a} vs fd {fd} (err {err:.3e})"
            );
            checked += 1;
        }
    }
    assert!(
        skipped * 5 < checked,
        "too many kink-adjacent stencils skipped ({skipped} of {})",
        checked + skipped
    );
}
