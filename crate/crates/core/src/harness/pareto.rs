//! Pareto frontier over (FLOPs, task metric) points.

use serde::{Deserialize, Serialize};

/// One candidate point: minimize `flops_effective`, maximize `metric`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub flops_effective: u64,
    pub metric: f64,
    /// `incentive`, `posthoc_mask`, or `dense`.
    pub provenance: String,
    pub lambda: f64,
    pub seed: u64,
    pub constraint: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ParetoFront {
    /// Non-dominated points, FLOPs ascending.
    pub points: Vec<ParetoPoint>,
}

/// Non-dominated subset via a single sorted sweep: after ordering by
/// (flops asc, metric desc), a point survives iff it strictly improves on
/// the best metric seen, or exactly duplicates the last survivor.
pub fn compute_pareto_front(points: &[ParetoPoint]) -> ParetoFront {
    let mut sorted: Vec<ParetoPoint> = points.to_vec();
    sorted.sort_by(|a, b| {
        a.flops_effective
            .cmp(&b.flops_effective)
            .then(b.metric.partial_cmp(&a.metric).expect("finite metrics"))
            .then(a.provenance.cmp(&b.provenance))
            .then(a.lambda.partial_cmp(&b.lambda).expect("finite lambda"))
            .then(a.seed.cmp(&b.seed))
    });
    let mut front: Vec<ParetoPoint> = Vec::new();
    let mut best_metric = f64::NEG_INFINITY;
    let mut best_flops = u64::MAX;
    for p in sorted {
        if p.metric > best_metric {
            best_metric = p.metric;
            best_flops = p.flops_effective;
            front.push(p);
        } else if p.metric == best_metric && p.flops_effective == best_flops {
            front.push(p); // exact tie on both axes: neither dominates
        }
    }
    ParetoFront { points: front }
}
