//! Frontier files, deployable plans and their offline replay.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::candidates::CandidateSet;
use crate::cluster::{Cents, ClusterSpec};
use crate::error::{Error, Result};
use crate::optimizer::{Aggregation, EvalRecord, ModelDetail, ParetoSet};
use crate::perfdb::PerfDb;
use crate::simulator::{build_stream, percentiles, simulate_stream, ReplicaConfig, SimOptions, StreamItem, P95};
use crate::workload::{estimate_quality, route, RoutingConfig, Trace};

fn digest_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}

fn save_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn load_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// A frontier together with the inputs it was computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoFile {
    pub spec_digest: String,
    pub db_digest: String,
    pub cands_digest: String,
    pub trace_digest: String,
    pub total_qps: f64,
    pub budget_cents: Cents,
    pub l_max: Option<f64>,
    pub q_min: Option<f64>,
    pub aggregation: Aggregation,
    pub pareto: ParetoSet,
}

impl ParetoFile {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        db: &PerfDb,
        cands: &CandidateSet,
        trace: &Trace,
        cons: &crate::optimizer::Constraints,
        aggregation: Aggregation,
        pareto: ParetoSet,
    ) -> Result<Self> {
        Ok(ParetoFile {
            spec_digest: hex::encode(db.spec_digest),
            db_digest: hex::encode(db.digest()),
            cands_digest: candidate_digest(cands)?,
            trace_digest: hex::encode(trace.digest()),
            total_qps: cons.total_qps,
            budget_cents: cons.budget,
            l_max: cons.l_max,
            q_min: cons.q_min,
            aggregation,
            pareto,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }
}

/// Digest of a candidate file's canonical JSON.
pub fn candidate_digest(cands: &CandidateSet) -> Result<String> {
    Ok(digest_hex(serde_json::to_string(cands)?.as_bytes()))
}

/// A selected operating point, ready to deploy or replay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Plan {
    pub spec_digest: String,
    pub db_digest: String,
    pub total_qps: f64,
    pub fractions: Vec<f64>,
    pub thresholds: Vec<f64>,
    /// Per model: candidate, replicas and λ_{m,i}.
    pub models: Vec<ModelDetail>,
    pub allocation: BTreeMap<String, u32>,
    pub cost_cents: Cents,
    pub cost_per_hour: f64,
    pub aggregation: Aggregation,
    pub predicted_l_p95_s: f64,
    pub predicted_q: f64,
}

impl Plan {
    pub fn from_record(file: &ParetoFile, rec: &EvalRecord) -> Self {
        Plan {
            spec_digest: file.spec_digest.clone(),
            db_digest: file.db_digest.clone(),
            total_qps: file.total_qps,
            fractions: rec.fractions.clone(),
            thresholds: rec.thresholds.clone(),
            models: rec.detail.clone(),
            allocation: rec.allocation.clone(),
            cost_cents: rec.cost_cents,
            cost_per_hour: rec.cost_per_hour,
            aggregation: file.aggregation,
            predicted_l_p95_s: rec.l_p95_s,
            predicted_q: rec.q,
        }
    }

    /// Checks the plan was made for `spec` and that every replica is valid on it.
    pub fn check_spec(&self, spec: &ClusterSpec) -> Result<()> {
        let found = hex::encode(spec.digest());
        if self.spec_digest != found {
            return Err(Error::DigestMismatch {
                expected: self.spec_digest.clone(),
                found,
            });
        }
        if self.models.len() != spec.models.len() {
            return Err(Error::validation("plan model count differs from the cluster spec"));
        }
        for (m, d) in self.models.iter().enumerate() {
            if spec.models[m].name != d.model {
                return Err(Error::NotFound(format!("model {}", d.model)));
            }
            if d.replicas.len() != d.replica_loads.len() {
                return Err(Error::validation(format!("model {}: replica and load counts differ", d.model)));
            }
            for r in &d.replicas {
                if r.model != d.model {
                    return Err(Error::validation(format!("replica {r} assigned to model {}", d.model)));
                }
                r.resolve(spec)?.validate().map_err(Error::Infeasible)?;
            }
        }
        Ok(())
    }

    pub fn routing(&self) -> Result<RoutingConfig> {
        RoutingConfig::new(self.thresholds.clone())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(self, path.as_ref())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_json(path.as_ref())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaReport {
    pub config: ReplicaConfig,
    /// Planned λ_{m,i}.
    pub planned_load: f64,
    pub requests: usize,
    pub quantiles: [f64; 6],
    pub utilization: f64,
    pub saturated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReport {
    pub model: String,
    pub requests: usize,
    pub quantiles: [f64; 6],
    pub replicas: Vec<ReplicaReport>,
}

/// Outcome of serving the trace with a plan in simulation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayReport {
    /// Pooled over every request, at the simulator's percentiles.
    pub quantiles: [f64; 6],
    pub l_p95_s: f64,
    pub q: f64,
    pub requests: usize,
    pub saturated: bool,
    pub models: Vec<ModelReport>,
    pub predicted_l_p95_s: f64,
    pub predicted_q: f64,
    /// (replayed − predicted) / predicted.
    pub p95_rel_delta: f64,
}

impl ReplayReport {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_json(self, path.as_ref())
    }
}

/// Smooth weighted round-robin over `weights`; returns the chosen index.
#[derive(Debug, Clone)]
pub struct WeightedRoundRobin {
    weights: Vec<f64>,
    current: Vec<f64>,
    total: f64,
}

impl WeightedRoundRobin {
    pub fn new(weights: &[f64]) -> Self {
        WeightedRoundRobin {
            weights: weights.to_vec(),
            current: vec![0.0; weights.len()],
            total: weights.iter().sum(),
        }
    }

    pub fn next_index(&mut self) -> Option<usize> {
        if !(self.total > 0.0) {
            return None;
        }
        for (c, w) in self.current.iter_mut().zip(&self.weights) {
            *c += w;
        }
        let best = (0..self.current.len())
            .max_by(|&a, &b| self.current[a].total_cmp(&self.current[b]).then(b.cmp(&a)))?;
        self.current[best] -= self.total;
        Some(best)
    }
}

/// Routes the trace by the plan's thresholds, spreads each model's queries
/// over its replicas by weighted round-robin on λ_{m,i} and simulates every
/// replica on its share of the arrival stream.
///
/// The system stream is the trace at the plan's total rate, extended so
/// that each loaded replica sees about `opts.min_requests` requests.
pub fn replay(plan: &Plan, trace: &Trace, spec: &ClusterSpec, seed: u64, opts: &SimOptions) -> Result<ReplayReport> {
    plan.check_spec(spec)?;
    if trace.models.len() != spec.models.len() || trace.models.iter().zip(&spec.models).any(|(a, b)| *a != b.name) {
        return Err(Error::validation("trace models differ from the cluster spec"));
    }
    let tau = plan.routing()?;
    if tau.num_models() != spec.models.len() {
        return Err(Error::validation("plan thresholds do not match the model count"));
    }
    if !(plan.total_qps > 0.0) {
        return Err(Error::validation("plan total qps must be positive"));
    }

    let smallest_share = plan
        .models
        .iter()
        .flat_map(|d| d.replica_loads.iter())
        .filter(|l| **l > 0.0)
        .fold(plan.total_qps, |a, &l| a.min(l))
        / plan.total_qps;
    let wanted = (opts.min_requests as f64 / smallest_share).ceil() as usize;
    let stream_len = wanted.clamp(trace.len(), 200_000);
    let stream = build_stream(trace, plan.total_qps, seed, stream_len);

    let mut wrr: Vec<WeightedRoundRobin> = plan
        .models
        .iter()
        .map(|d| WeightedRoundRobin::new(&d.replica_loads))
        .collect();
    let mut streams: Vec<Vec<Vec<StreamItem>>> = plan
        .models
        .iter()
        .map(|d| vec![Vec::new(); d.replicas.len()])
        .collect();
    for item in &stream {
        let m = route(&trace.queries[item.query], &tau);
        let r = wrr[m]
            .next_index()
            .ok_or_else(|| Error::validation(format!("model {} receives queries but has no planned load", plan.models[m].model)))?;
        streams[m][r].push(*item);
    }

    let mut all = Vec::with_capacity(stream.len());
    let mut saturated = false;
    let mut models = Vec::with_capacity(plan.models.len());
    for (m, d) in plan.models.iter().enumerate() {
        let mut lat_m = Vec::new();
        let mut replicas = Vec::with_capacity(d.replicas.len());
        for (i, cfg) in d.replicas.iter().enumerate() {
            let sub = &streams[m][i];
            let replica = cfg.resolve(spec)?;
            let coeffs = spec.coeffs_for(&cfg.gpu);
            let rate = if sub.len() > 1 {
                (sub.len() - 1) as f64 / (sub[sub.len() - 1].arrival_s - sub[0].arrival_s).max(1e-12)
            } else {
                d.replica_loads[i].max(1e-9)
            };
            let out = simulate_stream(&replica, &coeffs, sub, rate, opts);
            saturated |= out.result.saturated;
            let lat: Vec<f64> = out.latencies.iter().map(|(_, l)| *l).collect();
            replicas.push(ReplicaReport {
                config: cfg.clone(),
                planned_load: d.replica_loads[i],
                requests: sub.len(),
                quantiles: out.result.quantiles,
                utilization: out.utilization,
                saturated: out.result.saturated,
            });
            lat_m.extend(lat);
        }
        let requests = streams[m].iter().map(Vec::len).sum();
        models.push(ModelReport {
            model: d.model.clone(),
            requests,
            quantiles: if lat_m.is_empty() { [0.0; 6] } else { percentiles(&lat_m) },
            replicas,
        });
        all.extend(lat_m);
    }

    let quantiles = if saturated {
        [f64::INFINITY; 6]
    } else {
        match plan.aggregation {
            Aggregation::Pooled => percentiles(&all),
            Aggregation::Max => {
                let worst = models
                    .iter()
                    .filter(|m| m.requests > 0)
                    .max_by(|a, b| a.quantiles[P95].total_cmp(&b.quantiles[P95]));
                worst.map_or([0.0; 6], |m| m.quantiles)
            }
        }
    };
    let l = quantiles[P95];
    Ok(ReplayReport {
        quantiles,
        l_p95_s: l,
        q: estimate_quality(trace, &tau),
        requests: stream.len(),
        saturated,
        models,
        predicted_l_p95_s: plan.predicted_l_p95_s,
        predicted_q: plan.predicted_q,
        p95_rel_delta: (l - plan.predicted_l_p95_s) / plan.predicted_l_p95_s,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrr_follows_weights() {
        let mut w = WeightedRoundRobin::new(&[4.0, 2.0, 0.0]);
        let picks: Vec<usize> = (0..6).map(|_| w.next_index().unwrap()).collect();
        assert_eq!(picks.iter().filter(|&&i| i == 0).count(), 4);
        assert_eq!(picks.iter().filter(|&&i| i == 1).count(), 2);
        assert!(!picks.contains(&2));
    }

    #[test]
    fn wrr_without_weight_yields_nothing() {
        assert_eq!(WeightedRoundRobin::new(&[0.0, 0.0]).next_index(), None);
        assert_eq!(WeightedRoundRobin::new(&[]).next_index(), None);
    }
}
