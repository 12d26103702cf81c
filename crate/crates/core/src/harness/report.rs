//! Report files: results.csv (one row per run), results.json (full
//! fidelity, schema-versioned), pareto.csv. Output is byte-deterministic
//! for identical inputs; latency columns are informational and excluded
//! from reproducibility comparisons.

use super::pareto::ParetoFront;
use super::ExperimentConfig;
use crate::economics::RunResult;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// Documented column order of results.csv. `latency_ms` stays last so
/// reproducibility checks can strip it.
pub const CSV_COLUMNS: &[&str] = &[
    "provenance",
    "lambda",
    "constraint",
    "seed",
    "task_loss",
    "perplexity",
    "accuracy",
    "mean_gini",
    "mean_entropy_bits",
    "flops_dense",
    "flops_effective",
    "ffn_sparsity_fraction",
    "attention_support_fraction",
    "latency_ms",
];

/// FLOPs pairing between an incentive point and its nearest post-hoc
/// masking point, recorded in results.json.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosthocMatch {
    pub lambda: f64,
    pub seed: u64,
    pub matched_k: usize,
    pub incentive_flops: u64,
    pub posthoc_flops: u64,
}

/// Everything results.json holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub results: Vec<RunResult>,
    pub pareto: ParetoFront,
    pub posthoc_matches: Vec<PosthocMatch>,
}

fn csv_field_f64(v: f64) -> String {
    // shortest round-trip formatting; deterministic
    format!("{v}")
}

pub fn results_csv(results: &[RunResult]) -> String {
    let mut out = String::new();
    out.push_str(&CSV_COLUMNS.join(","));
    out.push('\n');
    for r in results {
        let accuracy = r.accuracy.map(csv_field_f64).unwrap_or_default();
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.provenance,
            csv_field_f64(r.lambda),
            r.constraint,
            r.seed,
            csv_field_f64(r.task_loss),
            csv_field_f64(r.perplexity),
            accuracy,
            csv_field_f64(r.metrics.mean_gini),
            csv_field_f64(r.metrics.mean_entropy_bits),
            r.metrics.flops_dense,
            r.metrics.flops_effective,
            csv_field_f64(r.metrics.ffn_sparsity_fraction),
            csv_field_f64(r.metrics.attention_support_fraction),
            csv_field_f64(r.latency_ms),
        );
    }
    out
}

pub fn pareto_csv(front: &ParetoFront) -> String {
    let mut out = String::from("flops_effective,metric,provenance,lambda,constraint,seed\n");
    for p in &front.points {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.flops_effective,
            csv_field_f64(p.metric),
            p.provenance,
            csv_field_f64(p.lambda),
            p.constraint,
            p.seed
        );
    }
    out
}

/// Write results.csv, results.json, and pareto.csv; returns the paths.
pub fn emit_report(report: &SavedReport, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();

    let csv_path = out_dir.join("results.csv");
    std::fs::write(&csv_path, results_csv(&report.results))
        .map_err(|e| Error::io(&csv_path, e))?;
    written.push(csv_path);

    let json_path = out_dir.join("results.json");
    let json =
        serde_json::to_string_pretty(report).map_err(|e| Error::Data(format!("report json: {e}")))?;
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    written.push(json_path);

    let pareto_path = out_dir.join("pareto.csv");
    std::fs::write(&pareto_path, pareto_csv(&report.pareto))
        .map_err(|e| Error::io(&pareto_path, e))?;
    written.push(pareto_path);

    Ok(written)
}

/// Parse a results.json produced by [`emit_report`].
pub fn results_json_from_bytes(bytes: &[u8]) -> Result<SavedReport> {
    let report: SavedReport =
        serde_json::from_slice(bytes).map_err(|e| Error::Data(format!("results.json: {e}")))?;
    if report.schema_version != REPORT_SCHEMA_VERSION {
        return Err(Error::Data(format!(
            "unsupported report schema version {}",
            report.schema_version
        )));
    }
    Ok(report)
}

pub fn load_results_json(path: &Path) -> Result<SavedReport> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    results_json_from_bytes(&bytes)
}

/// Strip the trailing latency column from every CSV row, for
/// reproducibility comparisons.
pub fn csv_without_latency(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.rfind(',') {
            Some(idx) => &line[..idx],
            None => line,
        })
        .map(|l| format!("{l}\n"))
        .collect()
}
