//! Multi-objective search over routing strategies and deployments.

pub mod acq;
pub mod hv;
pub mod run;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::cluster::{Cents, ClusterSpec};
use crate::error::{Error, Result};
use crate::perfdb::PerfDb;
use crate::surrogate::transform::logit_quality;
use crate::surrogate::ThetaPoint;
use crate::workload::{estimate_quality, load_distribution, thresholds_from_sorted, Trace};

pub use acq::{acq_cqnehvi, AcqConfig, AcqScore};
pub use hv::{hypervolume_2d, nondominated, Staircase};
pub use run::{propose, run, IterationLog, RunConfig, RunResult};

/// Hard and soft constraints of one optimization run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraints {
    pub budget: Cents,
    /// Available devices per GPU type, in cluster-spec order.
    pub availability: Vec<u32>,
    pub l_max: Option<f64>,
    pub q_min: Option<f64>,
    pub total_qps: f64,
}

impl Constraints {
    pub fn new(spec: &ClusterSpec, budget: Cents, total_qps: f64) -> Result<Self> {
        if budget.0 <= 0 {
            return Err(Error::validation("budget must be positive"));
        }
        if !(total_qps > 0.0) {
            return Err(Error::validation("total qps must be positive"));
        }
        Ok(Constraints {
            budget,
            availability: spec.gpus.iter().map(|g| g.count).collect(),
            l_max: None,
            q_min: None,
            total_qps,
        })
    }

    /// Whether sampled or observed objectives satisfy the soft constraints.
    pub fn satisfied(&self, latency: f64, quality: f64) -> bool {
        self.l_max.is_none_or(|l| latency <= l) && self.q_min.is_none_or(|q| quality >= q)
    }
}

/// Budget and availability check of per-GPU-type counts.
pub fn allocation_feasible(spec: &ClusterSpec, counts: &[u32], cons: &Constraints) -> bool {
    let cost: Cents = spec
        .gpus
        .iter()
        .zip(counts)
        .map(|(g, c)| g.unit_cost() * *c)
        .sum();
    cost <= cons.budget && counts.iter().zip(&cons.availability).all(|(c, d)| c <= d)
}

/// Total GPUs of each type used by a decision point.
pub fn allocation_of(theta: &ThetaPoint, spec: &ClusterSpec, cands: &CandidateSet) -> Result<Vec<u32>> {
    let mut counts = vec![0u32; spec.gpus.len()];
    for (m, &c) in theta.cands.iter().enumerate() {
        let cand = cands.candidate(m, c)?;
        for (n, g) in spec.gpus.iter().enumerate() {
            counts[n] += cand.gpus_of(&g.name);
        }
    }
    Ok(counts)
}

pub fn theta_cost(theta: &ThetaPoint, cands: &CandidateSet) -> Result<Cents> {
    theta
        .cands
        .iter()
        .enumerate()
        .map(|(m, &c)| Ok(cands.candidate(m, c)?.cost_cents))
        .sum()
}

/// Σ_m Σ_n a_{m,n}·b_n ≤ B_cap and Σ_m a_{m,n} ≤ d_n for every n.
pub fn hard_feasible(theta: &ThetaPoint, cons: &Constraints, spec: &ClusterSpec, cands: &CandidateSet) -> bool {
    match allocation_of(theta, spec, cands) {
        Ok(counts) => allocation_feasible(spec, &counts, cons),
        Err(_) => false,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Aggregation {
    /// P95 of the load-weighted mixture of every replica's latency distribution.
    #[default]
    Pooled,
    /// Largest per-model P95.
    Max,
}

const LEVELS: [f64; 6] = [0.50, 0.75, 0.90, 0.95, 0.99, 1.0];

/// CDF through (0, 0) and the stored percentiles, linear between knots.
/// `left` gives the left limit, which differs from the value where
/// percentiles tie.
fn knot_cdf(q: &[f64; 6], x: f64, left: bool) -> f64 {
    let (mut x0, mut l0) = (0.0, 0.0);
    for (&v, l) in q.iter().zip(LEVELS) {
        let before = if left { x <= v } else { x < v };
        if before {
            return if v > x0 { l0 + (l - l0) * (x - x0) / (v - x0) } else { l0 };
        }
        (x0, l0) = (v, l);
    }
    1.0
}

/// Quantile `p` of a weighted mixture of latency distributions, each
/// given by its values at the stored percentiles and interpolated
/// linearly between them.
pub fn pooled_quantile(components: &[(f64, [f64; 6])], p: f64) -> f64 {
    let total: f64 = components.iter().map(|c| c.0).sum();
    if !(total > 0.0) {
        return 0.0;
    }
    let mixture = |x: f64, left: bool| {
        components.iter().map(|(w, q)| w * knot_cdf(q, x, left)).sum::<f64>() / total
    };
    let mut xs: Vec<f64> = components.iter().flat_map(|c| c.1).collect();
    xs.push(0.0);
    xs.sort_by(f64::total_cmp);
    xs.dedup();
    let mut prev = (0.0, mixture(0.0, false));
    if prev.1 >= p - 1e-12 {
        return 0.0;
    }
    for &x in &xs[1..] {
        let below = mixture(x, true);
        if below >= p - 1e-12 {
            if (below - p).abs() <= 1e-12 {
                return x;
            }
            return prev.0 + (p - prev.1) / (below - prev.1) * (x - prev.0);
        }
        if mixture(x, false) >= p - 1e-12 {
            return x;
        }
        prev = (x, mixture(x, false));
    }
    f64::INFINITY
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDetail {
    pub model: String,
    pub candidate: String,
    /// λ_m, QPS.
    pub load: f64,
    /// λ_{m,i} per replica.
    pub replica_loads: Vec<f64>,
    pub replicas: Vec<crate::simulator::ReplicaConfig>,
    /// P95 of the model's replicas pooled, seconds; infinite when saturated.
    pub p95: f64,
}

/// One evaluated decision point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub fractions: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub cands: Vec<usize>,
    pub candidate_ids: Vec<String>,
    pub allocation: BTreeMap<String, u32>,
    pub cost_cents: Cents,
    pub cost_per_hour: f64,
    /// System P95, seconds. The penalty value when saturated.
    pub l_p95_s: f64,
    /// Quality in [0, 1].
    pub q: f64,
    pub saturated: bool,
    pub detail: Vec<ModelDetail>,
}

impl EvalRecord {
    pub fn theta(&self) -> Result<ThetaPoint> {
        Ok(ThetaPoint {
            fractions: crate::workload::LoadFractions::new(self.fractions.clone())?,
            cands: self.cands.clone(),
        })
    }

    /// Objectives as a minimization pair (log L, -logit Q).
    pub fn objective_point(&self) -> [f64; 2] {
        objective_point(self.l_p95_s, self.q)
    }
}

pub fn objective_point(latency: f64, quality: f64) -> [f64; 2] {
    [latency.ln(), -logit_quality(quality).0]
}

/// Composes routing, the performance database and the candidate sets into
/// objective values.
#[derive(Debug, Clone)]
pub struct Evaluator<'a> {
    pub trace: &'a Trace,
    pub db: &'a PerfDb,
    pub cands: &'a CandidateSet,
    pub total_qps: f64,
    pub delta: f64,
    pub aggregation: Aggregation,
    /// Latency recorded for saturated evaluations.
    pub penalty: f64,
    sorted_scores: Vec<f64>,
}

impl<'a> Evaluator<'a> {
    pub fn new(trace: &'a Trace, db: &'a PerfDb, cands: &'a CandidateSet, total_qps: f64) -> Self {
        Evaluator {
            trace,
            db,
            cands,
            total_qps,
            delta: cands.delta,
            aggregation: Aggregation::Pooled,
            penalty: 4.0 * db.max_finite_p95(),
            sorted_scores: trace.sorted_scores(),
        }
    }

    pub fn evaluate(&self, theta: &ThetaPoint) -> Result<EvalRecord> {
        let spec = &self.db.spec;
        let m_count = spec.models.len();
        if theta.cands.len() != m_count || theta.fractions.len() != m_count {
            return Err(Error::validation("decision point does not match the model count"));
        }
        let tau = thresholds_from_sorted(&theta.fractions, &self.sorted_scores);
        let q = estimate_quality(self.trace, &tau);
        let loads = load_distribution(&theta.fractions, self.total_qps);

        let mut detail = Vec::with_capacity(m_count);
        let mut pooled = Vec::new();
        let mut saturated = false;
        let mut allocation = BTreeMap::new();
        let mut cost = Cents(0);
        let mut ids = Vec::new();
        for (m, &c) in theta.cands.iter().enumerate() {
            let cand = self.cands.candidate(m, c)?;
            cost = cost + cand.cost_cents;
            for (g, n) in &cand.allocation {
                *allocation.entry(g.clone()).or_insert(0) += n;
            }
            ids.push(cand.id.clone());
            let replicas = cand.replicas();
            let lambda = loads.0[m];
            let mut replica_loads = vec![0.0; replicas.len()];
            let mut p95 = 0.0;
            if lambda > 0.0 {
                match self.db.split_load(&replicas, lambda, self.delta)? {
                    None => {
                        saturated = true;
                        p95 = f64::INFINITY;
                    }
                    Some(split) => {
                        let mut comps = Vec::new();
                        for (r, load) in replicas.iter().zip(&split.loads) {
                            if *load > 0.0 {
                                let rec = self.db.lookup(r, *load)?;
                                comps.push((*load, rec.quantiles));
                            }
                        }
                        p95 = pooled_quantile(&comps, 0.95);
                        pooled.extend(comps);
                        replica_loads = split.loads;
                    }
                }
            }
            detail.push(ModelDetail {
                model: spec.models[m].name.clone(),
                candidate: cand.id.clone(),
                load: lambda,
                replica_loads,
                replicas,
                p95,
            });
        }
        let latency = if saturated {
            self.penalty
        } else {
            match self.aggregation {
                Aggregation::Pooled => pooled_quantile(&pooled, 0.95),
                Aggregation::Max => detail.iter().map(|d| d.p95).fold(0.0, f64::max),
            }
        };
        Ok(EvalRecord {
            fractions: theta.fractions.as_slice().to_vec(),
            thresholds: tau.thresholds().to_vec(),
            cands: theta.cands.clone(),
            candidate_ids: ids,
            allocation,
            cost_cents: cost,
            cost_per_hour: cost.dollars(),
            l_p95_s: latency,
            q,
            saturated,
            detail,
        })
    }
}

/// Nondominated feasible records under (min L, max Q).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoSet {
    /// Ascending latency.
    pub records: Vec<EvalRecord>,
    pub reference: [f64; 2],
    pub hypervolume: f64,
}

impl ParetoSet {
    pub fn from_records<'r>(records: impl IntoIterator<Item = &'r EvalRecord>, cons: &Constraints, reference: [f64; 2]) -> Self {
        let feasible: Vec<&EvalRecord> = records
            .into_iter()
            .filter(|r| !r.saturated && cons.satisfied(r.l_p95_s, r.q))
            .collect();
        let pts: Vec<[f64; 2]> = feasible.iter().map(|r| r.objective_point()).collect();
        let keep = nondominated(&pts);
        let hypervolume = hypervolume_2d(&keep.iter().map(|&i| pts[i]).collect::<Vec<_>>(), reference);
        ParetoSet {
            records: keep.into_iter().map(|i| feasible[i].clone()).collect(),
            reference,
            hypervolume,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Requirement {
    /// Fastest record with Q at least this.
    MinQuality(f64),
    /// Best-quality record with L at most this.
    MaxLatency(f64),
}

/// Picks the frontier record meeting a performance requirement.
pub fn select(pareto: &ParetoSet, req: Requirement) -> Result<&EvalRecord> {
    let recs = &pareto.records;
    if recs.is_empty() {
        return Err(Error::validation("empty frontier"));
    }
    let chosen = match req {
        Requirement::MinQuality(qmin) => recs
            .iter()
            .filter(|r| r.q >= qmin)
            .min_by(|a, b| a.l_p95_s.total_cmp(&b.l_p95_s).then(a.cost_cents.cmp(&b.cost_cents))),
        Requirement::MaxLatency(lmax) => recs
            .iter()
            .filter(|r| r.l_p95_s <= lmax)
            .max_by(|a, b| a.q.total_cmp(&b.q).then(b.cost_cents.cmp(&a.cost_cents))),
    };
    chosen.ok_or_else(|| {
        let nearest = match req {
            Requirement::MinQuality(qmin) => recs
                .iter()
                .min_by(|a, b| (a.q - qmin).abs().total_cmp(&(b.q - qmin).abs())),
            Requirement::MaxLatency(lmax) => recs
                .iter()
                .min_by(|a, b| (a.l_p95_s - lmax).abs().total_cmp(&(b.l_p95_s - lmax).abs())),
        }
        .unwrap();
        Error::Unsatisfiable {
            nearest: format!("L={:.4}s Q={:.4} cost={}", nearest.l_p95_s, nearest.q, nearest.cost_cents),
        }
    })
}
