//! The incentive-weighted training loop.
//!
//! Each step: forward with trace, task loss, computation cost, total
//! loss = task + lambda·cost, backward, clip, optimizer update. Adaptive
//! moments with decoupled weight decay by default; a plain gradient-
//! descent option is kept for the literal form of the loop.

use crate::autodiff::{sample_index, Element, Tape, Tensor};
use crate::constraints::ConstraintSpec;
use crate::economics::{
    aggregate_metrics, computational_cost_on_tape, dump_attention, incentive_loss, EconomicMetrics,
    RunResult, DEFAULT_SPARSITY_THRESHOLD,
};
use crate::economics::CostConfig;
use crate::error::{Error, Result};
use crate::model::{ActivationTrace, TransformerModel};
use crate::stats::median;
use crate::tasks::{Dataset, Example, SplitDataset, Target, TaskKind};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::time::Instant;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Bias-corrected adaptive moments with decoupled weight decay.
    AdamW,
    /// Plain theta -= lr * grad, as the loop is usually written on paper.
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_fraction: f64,
    pub lambda: f64,
    pub cost: CostConfig,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub grad_clip_norm: f64,
    /// When false the cost term is absent from the loss graph entirely
    /// (it is still measured for logging). Exists to demonstrate that
    /// lambda = 0 with the term present walks the identical trajectory.
    pub cost_term_in_graph: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 8,
            max_epochs: 8,
            warmup_fraction: 0.1,
            lambda: 0.0,
            cost: CostConfig::default(),
            early_stop_patience: 3,
            seed: 0,
            eval_interval: 50,
            optimizer: OptimizerKind::AdamW,
            weight_decay: 0.01,
            grad_clip_norm: 1.0,
            cost_term_in_graph: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning_rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config("warmup_fraction must be in [0, 1)".into()));
        }
        if self.lambda < 0.0 {
            return Err(Error::Config("lambda must be >= 0".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 || self.eval_interval < 1 {
            return Err(Error::Config(
                "batch_size, max_epochs, eval_interval must be >= 1".into(),
            ));
        }
        if self.grad_clip_norm <= 0.0 {
            return Err(Error::Config("grad_clip_norm must be > 0".into()));
        }
        if !self.cost_term_in_graph && self.lambda > 0.0 {
            return Err(Error::Config(
                "cost_term_in_graph=false only makes sense at lambda = 0".into(),
            ));
        }
        self.cost.validate()
    }
}

// ── Schedule ─────────────────────────────────────────────────────────

/// Linear warmup to the peak over the first `warmup_fraction` of steps,
/// then linear decay to zero at `total_steps`.
pub fn lr_at_step(step: usize, total_steps: usize, peak: f64, warmup_fraction: f64) -> f64 {
    if total_steps == 0 {
        return peak;
    }
    let warmup = (total_steps as f64 * warmup_fraction).floor() as usize;
    if step <= warmup && warmup > 0 {
        peak * step as f64 / warmup as f64
    } else {
        peak * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

// ── Optimizer ────────────────────────────────────────────────────────

/// First/second moment buffers, one pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct OptimizerState<F: Element> {
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
    step: usize,
}

impl<F: Element> OptimizerState<F> {
    pub fn zeroed(param_sizes: &[usize]) -> Self {
        Self {
            m: param_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            v: param_sizes.iter().map(|&n| vec![F::zero(); n]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm<F: Element>(grads: &mut [Vec<F>], max_norm: f64) -> f64 {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &v in g {
            let x = v.as_f64();
            sq += x * x;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale = F::from_f64(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v * scale;
            }
        }
    }
    norm
}

/// One optimizer update over every parameter, at the given learning rate.
pub fn optimizer_step<F: Element>(
    params: &mut [&mut Tensor<F>],
    grads: &[Vec<F>],
    state: &mut OptimizerState<F>,
    lr: f64,
    kind: OptimizerKind,
    weight_decay: f64,
) {
    debug_assert_eq!(params.len(), grads.len());
    state.step += 1;
    let lr_f = F::from_f64(lr);
    match kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.iter_mut().zip(grads) {
                for (w, &gv) in p.data_mut().iter_mut().zip(g) {
                    *w = *w - lr_f * gv;
                }
            }
        }
        OptimizerKind::AdamW => {
            let t = state.step as i32;
            let b1 = F::from_f64(BETA1);
            let b2 = F::from_f64(BETA2);
            let one = F::one();
            let bias1 = one - b1.powi(t);
            let bias2 = one - b2.powi(t);
            let eps = F::from_f64(ADAM_EPS);
            let wd = F::from_f64(weight_decay);
            for ((p, g), (m, v)) in params
                .iter_mut()
                .zip(grads)
                .zip(state.m.iter_mut().zip(state.v.iter_mut()))
            {
                for i in 0..g.len() {
                    let gv = g[i];
                    m[i] = b1 * m[i] + (one - b1) * gv;
                    v[i] = b2 * v[i] + (one - b2) * gv * gv;
                    let m_hat = m[i] / bias1;
                    let v_hat = v[i] / bias2;
                    let w = p.data_mut();
                    w[i] = w[i] - lr_f * (m_hat / (v_hat.sqrt() + eps) + wd * w[i]);
                }
            }
        }
    }
}

// ── Loss assembly ────────────────────────────────────────────────────

/// Non-finite values anywhere in a training step name the step.
fn name_step(e: Error, step: usize) -> Error {
    match e {
        Error::NonFinite { context } => Error::NonFinite {
            context: format!("{context} at training step {step}"),
        },
        other => other,
    }
}

fn target_pairs(example: &Example) -> Vec<(usize, usize)> {
    match &example.target {
        Target::Tokens(ts) => ts
            .iter()
            .enumerate()
            .filter_map(|(row, t)| t.map(|tok| (row, tok)))
            .collect(),
        Target::Class(c) => vec![(example.tokens.len() - 1, *c)],
    }
}

// ── Training ─────────────────────────────────────────────────────────

/// One logged evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub task_loss: f64,
    pub cost: f64,
    pub total_loss: f64,
    pub val_metric: f64,
    pub metrics: EconomicMetrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub history: Vec<EvalPoint>,
    pub best_step: usize,
    pub best_val_metric: f64,
    pub final_result: RunResult,
    pub steps_run: usize,
}

/// Validation metric: perplexity for LM-style tasks (lower is better),
/// accuracy for classification (higher is better).
fn val_metric_of(kind: TaskKind, result: &RunResult) -> f64 {
    match kind {
        TaskKind::Lm => result.perplexity,
        TaskKind::Classify => result.accuracy.unwrap_or(0.0),
    }
}

fn is_better(kind: TaskKind, candidate: f64, incumbent: f64) -> bool {
    match kind {
        TaskKind::Lm => candidate < incumbent,
        TaskKind::Classify => candidate > incumbent,
    }
}

/// Run the incentive-driven loop. Deterministic given seed; aborts on a
/// non-finite loss; early-stops on validation stagnation and restores the
/// best parameters seen.
pub fn train<F: Element>(
    model: &mut TransformerModel<F>,
    data: &SplitDataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    if data.val.is_empty() {
        return Err(Error::Config("validation split is empty".into()));
    }

    let n_train = data.train.len();
    let steps_per_epoch = n_train.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.max_epochs;
    let sizes: Vec<usize> = model.named_params().iter().map(|(_, t)| t.len()).collect();
    let mut opt_state = OptimizerState::<F>::zeroed(&sizes);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x5eed));

    let mut history: Vec<EvalPoint> = Vec::new();
    let mut best_snapshot: Option<(usize, f64, Vec<Tensor<F>>)> = None;
    let mut stale_evals = 0usize;
    let mut step = 0usize;
    let mut stop = false;

    'epochs: for _epoch in 0..config.max_epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        for i in (1..order.len()).rev() {
            let j = sample_index(&mut order_rng, i + 1);
            order.swap(i, j);
        }
        for batch in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let ids = bound.ordered_ids();
            let mut task_sum = None;
            let mut cost_sum = None;
            for &idx in batch {
                let example = &data.train.examples[idx];
                let out = model
                    .forward(&mut tape, &bound, &example.tokens, &ConstraintSpec::None, true)
                    .map_err(|e| name_step(e, step))?;
                let pairs = target_pairs(example);
                let loss = tape.cross_entropy(out.logits, &pairs)?;
                task_sum = Some(match task_sum {
                    Some(acc) => tape.add(acc, loss)?,
                    None => loss,
                });
                let trace = out.trace.expect("trace requested");
                let cost = computational_cost_on_tape(&mut tape, &trace, &config.cost)?;
                cost_sum = Some(match cost_sum {
                    Some(acc) => tape.add(acc, cost)?,
                    None => cost,
                });
            }
            let inv_batch = F::from_f64(1.0 / batch.len() as f64);
            let task_loss = tape.scale(task_sum.expect("non-empty batch"), inv_batch);
            let cost = tape.scale(cost_sum.expect("non-empty batch"), inv_batch);
            let total = if config.cost_term_in_graph {
                incentive_loss(&mut tape, task_loss, cost, config.lambda)?
            } else {
                task_loss
            };

            let task_value = tape.scalar_value(task_loss).as_f64();
            let cost_value = tape.scalar_value(cost).as_f64();
            let total_value = tape.scalar_value(total).as_f64();
            if !total_value.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("training loss at training step {step}"),
                });
            }

            tape.backward(total)?;
            let mut grads: Vec<Vec<F>> = ids.iter().map(|&id| tape.grad_or_zeros(id)).collect();
            drop(tape);
            clip_global_norm(&mut grads, config.grad_clip_norm);
            let lr = lr_at_step(step, total_steps, config.learning_rate, config.warmup_fraction);
            let mut params = model.params_mut();
            optimizer_step(
                &mut params,
                &grads,
                &mut opt_state,
                lr,
                config.optimizer,
                config.weight_decay,
            );
            drop(params);
            step += 1;

            let last_step = step == total_steps;
            if step.is_multiple_of(config.eval_interval) || last_step {
                let result = evaluate(model, &data.val, &ConstraintSpec::None)
                    .map_err(|e| name_step(e, step))?;
                let metric = val_metric_of(data.val.kind, &result);
                history.push(EvalPoint {
                    step,
                    task_loss: task_value,
                    cost: cost_value,
                    total_loss: total_value,
                    val_metric: metric,
                    metrics: result.metrics.clone(),
                });
                let better = match &best_snapshot {
                    None => true,
                    Some((_, best, _)) => is_better(data.val.kind, metric, *best),
                };
                if better {
                    let snapshot = model
                        .named_params()
                        .iter()
                        .map(|(_, t)| (*t).clone())
                        .collect();
                    best_snapshot = Some((step, metric, snapshot));
                    stale_evals = 0;
                } else {
                    stale_evals += 1;
                    if stale_evals >= config.early_stop_patience {
                        stop = true;
                    }
                }
            }
            if stop {
                break 'epochs;
            }
        }
    }

    let (best_step, best_val_metric, snapshot) =
        best_snapshot.expect("at least one evaluation ran");
    for (param, saved) in model.params_mut().into_iter().zip(snapshot) {
        *param = saved;
    }
    let mut final_result = evaluate(model, &data.val, &ConstraintSpec::None)?;
    final_result.lambda = config.lambda;
    final_result.seed = config.seed;
    Ok(TrainReport {
        history,
        best_step,
        best_val_metric,
        final_result,
        steps_run: step,
    })
}

// ── Evaluation ───────────────────────────────────────────────────────

const LATENCY_WARMUPS: usize = 5;
const LATENCY_SAMPLES: usize = 30;

/// Evaluate without mutating parameters: pooled token-level loss and
/// perplexity, accuracy over supervised positions, aggregated allocation
/// metrics, and an informational latency measurement.
pub fn evaluate<F: Element>(
    model: &TransformerModel<F>,
    dataset: &Dataset,
    constraint: &ConstraintSpec,
) -> Result<RunResult> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation dataset is empty".into()));
    }
    let mut nll_sum = 0.0f64;
    let mut n_targets = 0usize;
    let mut n_correct = 0usize;
    let mut traces: Vec<ActivationTrace<F>> = Vec::with_capacity(dataset.len());
    for example in &dataset.examples {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let out = model.forward(&mut tape, &bound, &example.tokens, constraint, true)?;
        let pairs = target_pairs(example);
        let loss = tape.cross_entropy(out.logits, &pairs)?;
        nll_sum += tape.scalar_value(loss).as_f64() * pairs.len() as f64;
        n_targets += pairs.len();
        let logits = tape.value_tensor(out.logits);
        let v = logits.cols();
        for &(row, tok) in &pairs {
            let row_data = &logits.data()[row * v..(row + 1) * v];
            let mut best = 0;
            for j in 1..v {
                if row_data[j] > row_data[best] {
                    best = j;
                }
            }
            if best == tok {
                n_correct += 1;
            }
        }
        traces.push(out.trace.expect("trace requested"));
    }
    let mean_nll = nll_sum / n_targets as f64;
    let metrics = aggregate_metrics(&model.config, &traces, DEFAULT_SPARSITY_THRESHOLD)?;
    let latency_ms = measure_latency(model, &dataset.examples[0].tokens, constraint)?;
    Ok(RunResult {
        provenance: "single".into(),
        lambda: 0.0,
        constraint: constraint.label(),
        seed: 0,
        cost: CostConfig::default(),
        init_checksum: 0,
        task_loss: mean_nll,
        perplexity: mean_nll.exp(),
        accuracy: Some(n_correct as f64 / n_targets as f64),
        metrics,
        latency_ms,
        sample_attention: None,
    })
}

/// Median of 30 single-sequence forwards after 5 warmups.
fn measure_latency<F: Element>(
    model: &TransformerModel<F>,
    tokens: &[usize],
    constraint: &ConstraintSpec,
) -> Result<f64> {
    let run_once = || -> Result<f64> {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let start = Instant::now();
        model.forward(&mut tape, &bound, tokens, constraint, false)?;
        Ok(start.elapsed().as_secs_f64() * 1e3)
    };
    for _ in 0..LATENCY_WARMUPS {
        run_once()?;
    }
    let mut samples = Vec::with_capacity(LATENCY_SAMPLES);
    for _ in 0..LATENCY_SAMPLES {
        samples.push(run_once()?);
    }
    Ok(median(&samples))
}

/// Capture one sequence's attention for heatmap rendering.
pub fn sample_attention_dump<F: Element>(
    model: &TransformerModel<F>,
    dataset: &Dataset,
    constraint: &ConstraintSpec,
) -> Result<Vec<crate::economics::AttentionDump>> {
    if dataset.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    let (_, trace) = model.run(&dataset.examples[0].tokens, constraint)?;
    Ok(dump_attention(&trace))
}
