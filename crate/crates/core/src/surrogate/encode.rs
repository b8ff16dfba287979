//! Embedding of decision points into kernel features.

use serde::{Deserialize, Serialize};

use super::kernel::Features;
use crate::candidates::CandidateSet;
use crate::cluster::{Cents, ClusterSpec};
use crate::error::{Error, Result};
use crate::perfdb::PerfDb;
use crate::workload::{thresholds_from_sorted, LoadFractions, Trace};

/// A routing strategy (as load fractions) and one candidate index per model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaPoint {
    pub fractions: LoadFractions,
    pub cands: Vec<usize>,
}

/// Per (model, GPU type) suitability in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceMatrix(pub Vec<Vec<f64>>);

impl PreferenceMatrix {
    pub fn zeros(models: usize, gpus: usize) -> Self {
        PreferenceMatrix(vec![vec![0.0; gpus]; models])
    }

    /// Latency-per-dollar of the best single replica of each model on each
    /// GPU type at `ref_load`, min-max normalized within each model's row.
    /// GPU types with no unsaturated replica score 0.
    pub fn from_db(db: &PerfDb, ref_load: f64) -> Result<Self> {
        let mut rows = Vec::new();
        for m in &db.spec.models {
            let mut raw = Vec::new();
            for g in &db.spec.gpus {
                let mut best: f64 = 0.0;
                for cfg in db.configs_for(&m.name, &g.name) {
                    let p95 = db.p95(cfg, ref_load)?;
                    let cost = (g.unit_cost() * cfg.n_gpus).dollars();
                    if p95.is_finite() && p95 > 0.0 {
                        best = best.max(1.0 / (p95 * cost));
                    }
                }
                raw.push(best);
            }
            let finite: Vec<f64> = raw.iter().copied().filter(|v| *v > 0.0).collect();
            let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = finite.iter().copied().fold(0.0, f64::max);
            rows.push(
                raw.iter()
                    .map(|v| match () {
                        _ if *v <= 0.0 => 0.0,
                        _ if hi > lo => (v - lo) / (hi - lo),
                        _ => 1.0,
                    })
                    .collect(),
            );
        }
        Ok(PreferenceMatrix(rows))
    }

    pub fn get(&self, m: usize, n: usize) -> f64 {
        self.0[m][n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RoutingEncoding {
    /// The first M-1 load fractions.
    Fractions,
    /// The M-1 raw routing thresholds.
    Thresholds,
}

/// Maps decision points to features for one candidate set.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub routing: RoutingEncoding,
    sorted_scores: Vec<f64>,
    /// deploy[m][c]: deployment block of candidate c of model m.
    deploy: Vec<Vec<Vec<f64>>>,
    /// pref[m][c]: Σ_n a_{m,n}·s_{m,n}.
    pref: Vec<Vec<f64>>,
}

impl Encoder {
    pub fn new(
        cands: &CandidateSet,
        spec: &ClusterSpec,
        trace: &Trace,
        prefs: &PreferenceMatrix,
        budget: Cents,
        routing: RoutingEncoding,
    ) -> Result<Self> {
        if budget.0 <= 0 {
            return Err(Error::validation("budget must be positive"));
        }
        let mut deploy = Vec::new();
        let mut pref = Vec::new();
        for (m, mc) in cands.models.iter().enumerate() {
            let logs: Vec<f64> = mc.candidates.iter().map(|c| c.p95_ref.ln()).collect();
            let lo = logs.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut blocks = Vec::new();
            let mut prow = Vec::new();
            for (c, cand) in mc.candidates.iter().enumerate() {
                let mut b: Vec<f64> = spec
                    .gpus
                    .iter()
                    .map(|g| cand.gpus_of(&g.name) as f64 / g.count.max(1) as f64)
                    .collect();
                b.push(cand.cost_cents.0 as f64 / budget.0 as f64);
                b.push(if hi > lo { (logs[c] - lo) / (hi - lo) } else { 0.0 });
                blocks.push(b);
                prow.push(
                    spec.gpus
                        .iter()
                        .enumerate()
                        .map(|(n, g)| cand.gpus_of(&g.name) as f64 * prefs.get(m, n))
                        .sum(),
                );
            }
            deploy.push(blocks);
            pref.push(prow);
        }
        Ok(Encoder {
            routing,
            sorted_scores: trace.sorted_scores(),
            deploy,
            pref,
        })
    }

    pub fn num_models(&self) -> usize {
        self.deploy.len()
    }

    /// Feature dimension: (M - 1) + M·(N + 2).
    pub fn dim(&self) -> usize {
        let m = self.deploy.len();
        let per = self
            .deploy
            .iter()
            .find_map(|b| b.first().map(Vec::len))
            .unwrap_or(0);
        m.saturating_sub(1) + m * per
    }

    pub fn encode(&self, theta: &ThetaPoint) -> Result<Features> {
        let m = self.deploy.len();
        if theta.cands.len() != m || theta.fractions.len() != m {
            return Err(Error::validation("decision point does not match the model count"));
        }
        let routing = match self.routing {
            RoutingEncoding::Fractions => theta.fractions.as_slice()[..m - 1].to_vec(),
            RoutingEncoding::Thresholds => thresholds_from_sorted(&theta.fractions, &self.sorted_scores).thresholds().to_vec(),
        };
        let mut deploy = Vec::new();
        let mut pref = 0.0;
        for (mi, &c) in theta.cands.iter().enumerate() {
            let block = self.deploy[mi]
                .get(c)
                .ok_or_else(|| Error::NotFound(format!("candidate {c} of model {mi}")))?;
            // an idle model's deployment cannot move L or Q
            if theta.fractions.as_slice()[mi] > 0.0 {
                deploy.extend_from_slice(block);
                pref += self.pref[mi][c];
            } else {
                deploy.extend(std::iter::repeat_n(0.0, block.len()));
            }
        }
        Ok(Features { routing, deploy, pref })
    }
}
