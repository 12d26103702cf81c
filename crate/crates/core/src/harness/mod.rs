//! Experiment orchestration: config files, the two sweep protocols
//! (attention budgets, incentive weights), ablations, and report/chart
//! emission. Sweep points are independent jobs run on a small worker
//! pool; emission happens after all jobs complete.

pub mod charts;
pub mod pareto;
pub mod report;

pub use charts::emit_charts;
pub use pareto::{compute_pareto_front, ParetoFront, ParetoPoint};
pub use report::{
    csv_without_latency, emit_report, load_results_json, results_json_from_bytes, PosthocMatch,
    SavedReport, REPORT_SCHEMA_VERSION,
};

use crate::autodiff::Element;
use crate::constraints::ConstraintSpec;
use crate::economics::{CostConfig, RunResult};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, ModelConfig, TransformerModel};
use crate::tasks::{
    load_char_corpus, make_classification_task, make_copy_task, SplitDataset,
};
use crate::training::{evaluate, sample_attention_dump, train, TrainConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    BudgetSweep,
    LambdaSweep,
    Ablation,
    SingleRun,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F64,
    F32,
}

fn default_fractions() -> (f64, f64, f64) {
    (0.8, 0.1, 0.1)
}

/// Which dataset the experiment runs on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TaskSpec {
    Copy {
        #[serde(default = "default_copy_seq_len")]
        seq_len: usize,
        #[serde(default = "default_copy_vocab")]
        vocab: usize,
        #[serde(default = "default_num_salient")]
        num_salient: usize,
        #[serde(default = "default_n_examples")]
        n_examples: usize,
        #[serde(default)]
        data_seed: u64,
        #[serde(default = "default_fractions")]
        fractions: (f64, f64, f64),
    },
    CharLm {
        corpus_path: String,
        #[serde(default = "default_copy_seq_len")]
        seq_len: usize,
        #[serde(default)]
        data_seed: u64,
        #[serde(default = "default_fractions")]
        fractions: (f64, f64, f64),
    },
    Classify {
        #[serde(default = "default_copy_seq_len")]
        seq_len: usize,
        #[serde(default = "default_copy_vocab")]
        vocab: usize,
        #[serde(default = "default_num_salient")]
        num_salient: usize,
        #[serde(default = "default_n_examples")]
        n_examples: usize,
        #[serde(default)]
        data_seed: u64,
        #[serde(default = "default_fractions")]
        fractions: (f64, f64, f64),
    },
}

fn default_copy_seq_len() -> usize {
    64
}
fn default_copy_vocab() -> usize {
    64
}
fn default_num_salient() -> usize {
    4
}
fn default_n_examples() -> usize {
    512
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self::Copy {
            seq_len: default_copy_seq_len(),
            vocab: default_copy_vocab(),
            num_salient: default_num_salient(),
            n_examples: default_n_examples(),
            data_seed: 0,
            fractions: default_fractions(),
        }
    }
}

/// Sweep grids. k values descend from the full desk-scale window; lambda
/// values cover six decades on a log scale plus the zero baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSpec {
    pub k_values: Vec<usize>,
    pub lambda_values: Vec<f64>,
    pub ablation_lambda: f64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            k_values: vec![64, 32, 16, 8, 4],
            lambda_values: vec![0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2],
            ablation_lambda: 1e-3,
        }
    }
}

fn strictly_monotone<T: PartialOrd>(values: &[T]) -> bool {
    if values.len() < 2 {
        return true;
    }
    let increasing = values.windows(2).all(|w| w[0] < w[1]);
    let decreasing = values.windows(2).all(|w| w[0] > w[1]);
    increasing || decreasing
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.lambda_values.is_empty() {
            return Err(Error::Config("sweep value lists must be non-empty".into()));
        }
        if !strictly_monotone(&self.k_values) {
            return Err(Error::Config("k_values must be strictly monotone".into()));
        }
        if !strictly_monotone(&self.lambda_values) {
            return Err(Error::Config("lambda_values must be strictly monotone".into()));
        }
        if self.k_values.iter().any(|&k| k < 1) {
            return Err(Error::Config("k_values must be >= 1".into()));
        }
        if self.lambda_values.iter().any(|&l| l < 0.0) {
            return Err(Error::Config("lambda_values must be >= 0".into()));
        }
        if self.ablation_lambda < 0.0 {
            return Err(Error::Config("ablation_lambda must be >= 0".into()));
        }
        Ok(())
    }
}

/// One experiment definition; a single JSON document. Unknown keys are
/// rejected so sweep typos fail loudly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub precision: Precision,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub task: TaskSpec,
    pub sweep: SweepSpec,
    /// Constraint applied by single-run evaluation.
    pub constraint: ConstraintSpec,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    pub workers: usize,
    /// Optional pre-trained baseline for the budget sweep; trained on the
    /// spot when absent.
    pub checkpoint: Option<String>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: CONFIG_SCHEMA_VERSION,
            experiment: ExperimentKind::SingleRun,
            precision: Precision::F64,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            task: TaskSpec::default(),
            sweep: SweepSpec::default(),
            constraint: ConstraintSpec::None,
            seeds: vec![1],
            out_dir: "out".into(),
            workers: 2,
            checkpoint: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "unsupported config schema_version {}",
                self.schema_version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.workers < 1 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.sweep.validate()?;
        self.constraint.validate()?;
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config json: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }
}

/// Everything a finished experiment produces, pre-serialization.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub results: Vec<RunResult>,
    pub front: ParetoFront,
    pub posthoc_matches: Vec<PosthocMatch>,
}

// ── Job plumbing ─────────────────────────────────────────────────────

/// Run `f` over items on up to `workers` threads; output order matches
/// input order regardless of scheduling.
fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    let n = items.len();
    if n == 0 {
        return Ok(Vec::new());
    }
    let slots: Vec<Mutex<Option<Result<R>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|slot| slot.into_inner().expect("slot lock").expect("job ran"))
        .collect()
}

fn build_task(task: &TaskSpec) -> Result<SplitDataset> {
    match task {
        TaskSpec::Copy {
            seq_len,
            vocab,
            num_salient,
            n_examples,
            data_seed,
            fractions,
        } => {
            let (ds, _) = make_copy_task(*seq_len, *vocab, *num_salient, *n_examples, *data_seed)?;
            ds.split(*fractions, *data_seed)
        }
        TaskSpec::CharLm {
            corpus_path,
            seq_len,
            data_seed,
            fractions,
        } => load_char_corpus(Path::new(corpus_path), *seq_len, *fractions, *data_seed),
        TaskSpec::Classify {
            seq_len,
            vocab,
            num_salient,
            n_examples,
            data_seed,
            fractions,
        } => {
            let (ds, _) =
                make_classification_task(*seq_len, *vocab, *num_salient, *n_examples, *data_seed)?;
            ds.split(*fractions, *data_seed)
        }
    }
}

/// Fit the architecture to the data: vocabulary from the dataset, window
/// at least as long as the longest example.
fn adapted_model_config(base: &ModelConfig, data: &SplitDataset) -> ModelConfig {
    let mut cfg = base.clone();
    cfg.vocab_size = data.train.vocab_size();
    let longest = data
        .train
        .examples
        .iter()
        .chain(&data.val.examples)
        .chain(&data.test.examples)
        .map(|e| e.tokens.len())
        .max()
        .unwrap_or(cfg.max_seq_len);
    cfg.max_seq_len = cfg.max_seq_len.max(longest).max(2);
    cfg
}

/// Train one model; returns (model, its final validation result, init checksum).
fn train_point<F: Element>(
    model_cfg: &ModelConfig,
    data: &SplitDataset,
    base_train: &TrainConfig,
    seed: u64,
    lambda: f64,
    cost: CostConfig,
) -> Result<(TransformerModel<F>, RunResult, u64)> {
    let mut cfg = model_cfg.clone();
    cfg.seed = seed;
    let mut model = TransformerModel::<F>::init(cfg)?;
    let init_checksum = model.param_checksum();
    let train_cfg = TrainConfig {
        lambda,
        cost: cost.clone(),
        seed,
        ..base_train.clone()
    };
    let report = train(&mut model, data, &train_cfg)?;
    let mut result = report.final_result;
    result.lambda = lambda;
    result.seed = seed;
    result.cost = cost;
    result.init_checksum = init_checksum;
    Ok((model, result, init_checksum))
}

// ── Protocols ────────────────────────────────────────────────────────

/// Evaluate one trained baseline under every attention budget in the
/// sweep, without retraining. One result per (k, seed).
pub fn run_budget_sweep<F: Element>(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    let data = build_task(&config.task)?;
    let model_cfg = adapted_model_config(&config.model, &data);

    let per_seed = |&seed: &u64| -> Result<Vec<RunResult>> {
        let (model, init_checksum) = match &config.checkpoint {
            Some(path) => {
                let model = load_checkpoint::<F>(Path::new(path))?;
                let checksum = model.param_checksum();
                (model, checksum)
            }
            None => {
                let (model, _, checksum) = train_point::<F>(
                    &model_cfg,
                    &data,
                    &config.train,
                    seed,
                    0.0,
                    config.train.cost.clone(),
                )?;
                (model, checksum)
            }
        };
        let mut results = Vec::with_capacity(config.sweep.k_values.len());
        for (i, &k) in config.sweep.k_values.iter().enumerate() {
            let constraint = ConstraintSpec::TopK { budget_k: k };
            let mut r = evaluate(&model, &data.val, &constraint)?;
            r.provenance = "budget".into();
            r.lambda = 0.0;
            r.seed = seed;
            r.cost = config.train.cost.clone();
            r.init_checksum = init_checksum;
            // heatmaps at the extremes of the first seed
            if seed == config.seeds[0] && (i == 0 || i == config.sweep.k_values.len() - 1) {
                r.sample_attention = Some(sample_attention_dump(&model, &data.val, &constraint)?);
            }
            results.push(r);
        }
        Ok(results)
    };
    let nested = parallel_map(&config.seeds, config.workers, per_seed)?;
    Ok(nested.into_iter().flatten().collect())
}

/// Train one model per (lambda, seed) from the same per-seed
/// initialization, evaluate each unconstrained, and evaluate the zero-
/// lambda model under post-hoc top-k masking as the comparison series.
pub fn run_lambda_sweep<F: Element>(
    config: &ExperimentConfig,
) -> Result<(Vec<RunResult>, ParetoFront, Vec<PosthocMatch>)> {
    config.validate()?;
    let data = build_task(&config.task)?;
    let model_cfg = adapted_model_config(&config.model, &data);
    let max_lambda = config
        .sweep
        .lambda_values
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);

    let jobs: Vec<(u64, f64)> = config
        .seeds
        .iter()
        .flat_map(|&seed| config.sweep.lambda_values.iter().map(move |&l| (seed, l)))
        .collect();
    let trained = parallel_map(&jobs, config.workers, |&(seed, lambda)| {
        let (model, mut result, _) = train_point::<F>(
            &model_cfg,
            &data,
            &config.train,
            seed,
            lambda,
            config.train.cost.clone(),
        )?;
        result.provenance = if lambda == 0.0 { "dense" } else { "incentive" }.into();
        if seed == config.seeds[0] && (lambda == 0.0 || lambda == max_lambda) {
            result.sample_attention =
                Some(sample_attention_dump(&model, &data.val, &ConstraintSpec::None)?);
        }
        let baseline = (lambda == 0.0).then_some(model);
        Ok((result, baseline))
    })?;

    let mut results: Vec<RunResult> = Vec::new();
    let mut baselines: Vec<(u64, TransformerModel<F>)> = Vec::new();
    for ((seed, lambda), (result, baseline)) in jobs.iter().zip(trained) {
        results.push(result);
        if let Some(model) = baseline {
            debug_assert_eq!(*lambda, 0.0);
            baselines.push((*seed, model));
        }
    }

    // post-hoc masking series over the k grid
    let posthoc_jobs: Vec<(usize, usize)> = (0..baselines.len())
        .flat_map(|b| (0..config.sweep.k_values.len()).map(move |k| (b, k)))
        .collect();
    let posthoc = parallel_map(&posthoc_jobs, config.workers, |&(b, ki)| {
        let (seed, model) = &baselines[b];
        let k = config.sweep.k_values[ki];
        let mut r = evaluate(model, &data.val, &ConstraintSpec::TopK { budget_k: k })?;
        r.provenance = "posthoc_mask".into();
        r.lambda = 0.0;
        r.seed = *seed;
        r.cost = config.train.cost.clone();
        r.init_checksum = model.param_checksum();
        Ok(r)
    })?;
    results.extend(posthoc);

    // FLOPs pairing, documented in the report
    let mut matches = Vec::new();
    for r in results.iter().filter(|r| r.provenance == "incentive") {
        let nearest = results
            .iter()
            .filter(|p| p.provenance == "posthoc_mask" && p.seed == r.seed)
            .min_by_key(|p| p.metrics.flops_effective.abs_diff(r.metrics.flops_effective));
        if let Some(p) = nearest {
            matches.push(PosthocMatch {
                lambda: r.lambda,
                seed: r.seed,
                matched_k: p.budget_k().unwrap_or(0),
                incentive_flops: r.metrics.flops_effective,
                posthoc_flops: p.metrics.flops_effective,
            });
        }
    }

    let points: Vec<ParetoPoint> = results
        .iter()
        .map(|r| ParetoPoint {
            flops_effective: r.metrics.flops_effective,
            metric: r.accuracy.unwrap_or(0.0),
            provenance: r.provenance.clone(),
            lambda: r.lambda,
            seed: r.seed,
            constraint: r.constraint.clone(),
        })
        .collect();
    let front = compute_pareto_front(&points);
    Ok((results, front, matches))
}

/// Three runs at a fixed lambda differing only in which activations the
/// cost term taxes: attention only, FFN only, both.
pub fn run_ablation<F: Element>(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    let data = build_task(&config.task)?;
    let model_cfg = adapted_model_config(&config.model, &data);
    let base = config.train.cost.clone();
    let variants: Vec<(&'static str, CostConfig)> = vec![
        (
            "ablate_attention",
            CostConfig {
                beta: 0.0,
                ..base.clone()
            },
        ),
        (
            "ablate_ffn",
            CostConfig {
                alpha: 0.0,
                ..base.clone()
            },
        ),
        ("ablate_both", base),
    ];
    let jobs: Vec<(u64, usize)> = config
        .seeds
        .iter()
        .flat_map(|&seed| (0..variants.len()).map(move |v| (seed, v)))
        .collect();
    parallel_map(&jobs, config.workers, |&(seed, v)| {
        let (label, cost) = &variants[v];
        let (_, mut result, _) = train_point::<F>(
            &model_cfg,
            &data,
            &config.train,
            seed,
            config.sweep.ablation_lambda,
            cost.clone(),
        )?;
        result.provenance = (*label).into();
        Ok(result)
    })
}

/// Train once per seed with the configured lambda, evaluate under the
/// configured constraint.
pub fn run_single<F: Element>(config: &ExperimentConfig) -> Result<Vec<RunResult>> {
    config.validate()?;
    let data = build_task(&config.task)?;
    let model_cfg = adapted_model_config(&config.model, &data);
    parallel_map(&config.seeds, config.workers, |&seed| {
        let (model, _, init_checksum) = train_point::<F>(
            &model_cfg,
            &data,
            &config.train,
            seed,
            config.train.lambda,
            config.train.cost.clone(),
        )?;
        let mut r = evaluate(&model, &data.val, &config.constraint)?;
        r.provenance = "single".into();
        r.lambda = config.train.lambda;
        r.seed = seed;
        r.cost = config.train.cost.clone();
        r.init_checksum = init_checksum;
        if seed == config.seeds[0] {
            r.sample_attention = Some(sample_attention_dump(&model, &data.val, &config.constraint)?);
        }
        Ok(r)
    })
}

/// Dispatch on experiment kind and element precision.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    match config.precision {
        Precision::F64 => run_experiment_typed::<f64>(config),
        Precision::F32 => run_experiment_typed::<f32>(config),
    }
}

fn run_experiment_typed<F: Element>(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    match config.experiment {
        ExperimentKind::BudgetSweep => Ok(ExperimentOutput {
            results: run_budget_sweep::<F>(config)?,
            front: ParetoFront::default(),
            posthoc_matches: Vec::new(),
        }),
        ExperimentKind::LambdaSweep => {
            let (results, front, posthoc_matches) = run_lambda_sweep::<F>(config)?;
            Ok(ExperimentOutput {
                results,
                front,
                posthoc_matches,
            })
        }
        ExperimentKind::Ablation => Ok(ExperimentOutput {
            results: run_ablation::<F>(config)?,
            front: ParetoFront::default(),
            posthoc_matches: Vec::new(),
        }),
        ExperimentKind::SingleRun => Ok(ExperimentOutput {
            results: run_single::<F>(config)?,
            front: ParetoFront::default(),
            posthoc_matches: Vec::new(),
        }),
    }
}

/// Write results.csv/results.json/pareto.csv and every supported chart.
pub fn emit_all(
    config: &ExperimentConfig,
    output: &ExperimentOutput,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    let report = SavedReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        results: output.results.clone(),
        pareto: output.front.clone(),
        posthoc_matches: output.posthoc_matches.clone(),
    };
    let mut written = emit_report(&report, out_dir)?;
    written.extend(emit_charts(&output.results, &output.front, out_dir)?);
    Ok(written)
}
