//! Per-model deployment candidates: homogeneous data-parallel groups
//! skimmed in (latency, cost), and heterogeneous mixes found by a
//! multiple-choice knapsack over GPU types at a grid of budgets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::{Cents, ClusterSpec};
use crate::error::{Error, Result};
use crate::perfdb::{split_units, PerfDb};
use crate::simulator::ReplicaConfig;

/// Indices of the points not weakly dominated by any other point, in
/// ascending cost order. Points are (latency, cost); identical points
/// collapse to the lowest index.
pub fn pareto_skim(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .1
            .total_cmp(&points[b].1)
            .then(points[a].0.total_cmp(&points[b].0))
            .then(a.cmp(&b))
    });
    let mut out = Vec::new();
    let mut best_latency = f64::INFINITY;
    // everything visited so far is no more expensive
    for i in order {
        if points[i].0 < best_latency {
            out.push(i);
            best_latency = points[i].0;
        }
    }
    out
}

/// Identical replicas of one shape on one GPU type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ReplicaGroup {
    pub gpu: String,
    pub tp: u32,
    pub pp: u32,
    pub dp: u32,
}

impl ReplicaGroup {
    pub fn n_gpus(&self) -> u32 {
        self.tp * self.pp * self.dp
    }
}

impl fmt::Display for ReplicaGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}x(tp{},pp{})", self.gpu, self.dp, self.tp, self.pp)
    }
}

/// One deployment option for a model: a data-parallel set of replicas,
/// possibly spanning GPU types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeploymentCandidate {
    pub id: String,
    pub model: String,
    /// Sorted by GPU name, then shape.
    pub groups: Vec<ReplicaGroup>,
    /// GPUs of each type used.
    pub allocation: BTreeMap<String, u32>,
    pub cost_cents: Cents,
    /// P95 at the set's reference load.
    pub p95_ref: f64,
    /// (load, P95) on the database grid; `None` where no split is unsaturated.
    pub latency_curve: Vec<(f64, Option<f64>)>,
}

impl DeploymentCandidate {
    fn from_groups(db: &PerfDb, model: &str, mut groups: Vec<ReplicaGroup>, ref_load: f64, delta: f64) -> Result<Self> {
        groups.sort();
        let id = groups.iter().map(ToString::to_string).collect::<Vec<_>>().join("+");
        let mut allocation = BTreeMap::new();
        for g in &groups {
            *allocation.entry(g.gpu.clone()).or_insert(0) += g.n_gpus();
        }
        let cost_cents = db
            .spec
            .allocation_cost(allocation.iter().map(|(k, v)| (k.as_str(), *v)))?;
        let replicas = expand(model, &groups);
        let p95_ref = db
            .split_load(&replicas, ref_load, delta)?
            .map_or(f64::INFINITY, |s| s.p95);
        let latency_curve = db
            .grid
            .loads()
            .iter()
            .map(|&l| Ok((l, db.split_load(&replicas, l, delta)?.map(|s| s.p95))))
            .collect::<Result<_>>()?;
        Ok(DeploymentCandidate {
            id,
            model: model.to_string(),
            groups,
            allocation,
            cost_cents,
            p95_ref,
            latency_curve,
        })
    }

    pub fn replicas(&self) -> Vec<ReplicaConfig> {
        expand(&self.model, &self.groups)
    }

    pub fn gpus_of(&self, gpu: &str) -> u32 {
        self.allocation.get(gpu).copied().unwrap_or(0)
    }
}

fn expand(model: &str, groups: &[ReplicaGroup]) -> Vec<ReplicaConfig> {
    groups
        .iter()
        .flat_map(|g| (0..g.dp).map(move |_| ReplicaConfig::new(model, &g.gpu, g.tp, g.pp)))
        .collect()
}

/// Homogeneous candidates for `model` on `gpu`: every stored shape
/// replicated dp times within the GPU count, skimmed by (P95 at `load`, cost).
pub fn gen_homog(db: &PerfDb, model: &str, gpu: &str, load: f64, delta: f64) -> Result<Vec<DeploymentCandidate>> {
    let spec_gpu = db
        .spec
        .gpu(gpu)
        .ok_or_else(|| Error::NotFound(format!("gpu {gpu}")))?;
    let mut all = Vec::new();
    for shape in db.configs_for(model, gpu) {
        for dp in 1..=spec_gpu.count / shape.n_gpus {
            let group = ReplicaGroup {
                gpu: gpu.to_string(),
                tp: shape.tp,
                pp: shape.pp,
                dp,
            };
            let cand = DeploymentCandidate::from_groups(db, model, vec![group], load, delta)?;
            if cand.p95_ref.is_finite() {
                all.push(cand);
            }
        }
    }
    Ok(skim_candidates(all))
}

fn skim_candidates(cands: Vec<DeploymentCandidate>) -> Vec<DeploymentCandidate> {
    let points: Vec<(f64, f64)> = cands
        .iter()
        .map(|c| (c.p95_ref, c.cost_cents.0 as f64))
        .collect();
    let keep = pareto_skim(&points);
    let mut slots: Vec<Option<DeploymentCandidate>> = cands.into_iter().map(Some).collect();
    keep.into_iter().map(|i| slots[i].take().unwrap()).collect()
}

/// A knapsack item: cost and latency with k load units, k = 0..=units.
#[derive(Debug, Clone, PartialEq)]
pub struct KnapsackItem {
    pub cost: Cents,
    pub curve: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KnapsackSolution {
    /// Chosen item per group, if any.
    pub choice: Vec<Option<usize>>,
    /// Load units given to each group.
    pub units: Vec<usize>,
    pub cost: Cents,
    /// Worst latency across the chosen items under the best load split.
    pub value: f64,
}

/// Picks at most one item per group, total cost within `budget`, so that
/// the best split of `units` load units over the chosen items minimizes
/// the worst item latency. Ties go to the lower cost. `None` if no
/// affordable selection can carry the load unsaturated.
pub fn knapsack_mck(groups: &[Vec<KnapsackItem>], budget: Cents, units: usize) -> Option<KnapsackSolution> {
    #[derive(Clone, Copy)]
    struct Back {
        prev_cost: Cents,
        item: Option<usize>,
        given: usize,
    }
    // states[g]: cost -> per k (value, back-pointer)
    type Layer = BTreeMap<Cents, Vec<(f64, Option<Back>)>>;
    let mut layers: Vec<Layer> = Vec::with_capacity(groups.len() + 1);
    let mut init = vec![(f64::INFINITY, None); units + 1];
    init[0] = (0.0, None);
    layers.push([(Cents(0), init)].into_iter().collect());

    for group in groups {
        let prev = layers.last().unwrap();
        let mut next: Layer = BTreeMap::new();
        for (&cost, row) in prev {
            let entry = next
                .entry(cost)
                .or_insert_with(|| vec![(f64::INFINITY, None); units + 1]);
            for k in 0..=units {
                if row[k].0 < entry[k].0 {
                    entry[k] = (
                        row[k].0,
                        Some(Back {
                            prev_cost: cost,
                            item: None,
                            given: 0,
                        }),
                    );
                }
            }
            for (i, item) in group.iter().enumerate() {
                let new_cost = cost + item.cost;
                if new_cost > budget {
                    continue;
                }
                let entry = next
                    .entry(new_cost)
                    .or_insert_with(|| vec![(f64::INFINITY, None); units + 1]);
                for k0 in 0..=units {
                    if !row[k0].0.is_finite() {
                        continue;
                    }
                    for x in 0..=units - k0 {
                        let v = row[k0].0.max(item.curve[x]);
                        if v < entry[k0 + x].0 {
                            entry[k0 + x] = (
                                v,
                                Some(Back {
                                    prev_cost: cost,
                                    item: Some(i),
                                    given: x,
                                }),
                            );
                        }
                    }
                }
            }
        }
        layers.push(next);
    }

    let last = layers.last().unwrap();
    let (best_cost, best_value) = last
        .iter()
        .filter(|(c, _)| **c <= budget)
        .map(|(c, row)| (*c, row[units].0))
        .filter(|(_, v)| v.is_finite())
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))?;

    let mut choice = vec![None; groups.len()];
    let mut given = vec![0; groups.len()];
    let (mut cost, mut k) = (best_cost, units);
    for g in (0..groups.len()).rev() {
        let back = layers[g + 1][&cost][k].1.expect("reachable state has a back-pointer");
        choice[g] = back.item;
        given[g] = back.given;
        cost = back.prev_cost;
        k -= back.given;
    }
    Some(KnapsackSolution {
        choice,
        units: given,
        cost: best_cost,
        value: best_value,
    })
}

/// The candidate set of one model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelCandidates {
    pub model: String,
    pub ref_load: f64,
    /// Ascending cost.
    pub candidates: Vec<DeploymentCandidate>,
}

/// Homogeneous frontiers of every GPU type merged with knapsack mixes at
/// `grid_size` evenly spaced budgets up to `budget`, skimmed at `ref_load`.
pub fn gen_hetero(
    db: &PerfDb,
    model: &str,
    budget: Cents,
    grid_size: usize,
    ref_load: f64,
    delta: f64,
) -> Result<ModelCandidates> {
    if grid_size == 0 {
        return Err(Error::validation("budget grid size must be positive"));
    }
    let (units, step) = split_units(ref_load, delta);
    let mut homog = Vec::new();
    for gpu in &db.spec.gpus {
        let frontier: Vec<DeploymentCandidate> = gen_homog(db, model, &gpu.name, ref_load, delta)?
            .into_iter()
            .filter(|c| c.cost_cents <= budget)
            .collect();
        homog.push(frontier);
    }
    let items: Vec<Vec<KnapsackItem>> = homog
        .iter()
        .map(|frontier| {
            frontier
                .iter()
                .map(|c| {
                    let replicas = c.replicas();
                    let curve = (0..=units)
                        .map(|k| {
                            Ok(db
                                .split_load(&replicas, k as f64 * step, delta)?
                                .map_or(f64::INFINITY, |s| s.p95))
                        })
                        .collect::<Result<_>>()?;
                    Ok(KnapsackItem {
                        cost: c.cost_cents,
                        curve,
                    })
                })
                .collect::<Result<_>>()
        })
        .collect::<Result<_>>()?;

    let mut pool: Vec<DeploymentCandidate> = homog.iter().flatten().cloned().collect();
    let mut seen: BTreeSet<String> = pool.iter().map(|c| c.id.clone()).collect();
    for j in 1..=grid_size {
        let o = Cents(budget.0 * j as i64 / grid_size as i64);
        let Some(sol) = knapsack_mck(&items, o, units) else {
            continue;
        };
        let groups: Vec<ReplicaGroup> = sol
            .choice
            .iter()
            .enumerate()
            .filter_map(|(g, c)| c.map(|i| homog[g][i].groups.clone()))
            .flatten()
            .collect();
        let cand = DeploymentCandidate::from_groups(db, model, groups, ref_load, delta)?;
        if seen.insert(cand.id.clone()) {
            pool.push(cand);
        }
    }
    pool.retain(|c| c.cost_cents <= budget && c.p95_ref.is_finite());
    Ok(ModelCandidates {
        model: model.to_string(),
        ref_load,
        candidates: skim_candidates(pool),
    })
}

/// The candidate file: C_m for every model plus provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    pub spec_digest: String,
    pub db_digest: String,
    pub budget_cents: Cents,
    pub delta: f64,
    pub models: Vec<ModelCandidates>,
}

impl CandidateSet {
    pub fn generate(db: &PerfDb, budget: Cents, grid_size: usize, ref_load: f64, delta: f64) -> Result<Self> {
        let models = db
            .spec
            .models
            .iter()
            .map(|m| gen_hetero(db, &m.name, budget, grid_size, ref_load, delta))
            .collect::<Result<_>>()?;
        Ok(CandidateSet {
            spec_digest: hex::encode(db.spec_digest),
            db_digest: hex::encode(db.digest()),
            budget_cents: budget,
            delta,
            models,
        })
    }

    pub fn model(&self, m: usize) -> &ModelCandidates {
        &self.models[m]
    }

    pub fn num_models(&self) -> usize {
        self.models.len()
    }

    pub fn candidate(&self, m: usize, idx: usize) -> Result<&DeploymentCandidate> {
        self.models
            .get(m)
            .and_then(|mc| mc.candidates.get(idx))
            .ok_or_else(|| Error::NotFound(format!("candidate {idx} of model {m}")))
    }

    pub fn find(&self, m: usize, id: &str) -> Result<usize> {
        self.models
            .get(m)
            .and_then(|mc| mc.candidates.iter().position(|c| c.id == id))
            .ok_or_else(|| Error::NotFound(format!("candidate {id}")))
    }

    /// Checks the set was generated from `db`.
    pub fn check_db(&self, db: &PerfDb) -> Result<()> {
        let found = hex::encode(db.digest());
        if self.db_digest != found {
            return Err(Error::DigestMismatch {
                expected: self.db_digest.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn check_spec(&self, spec: &ClusterSpec) -> Result<()> {
        let found = hex::encode(spec.digest());
        if self.spec_digest != found {
            return Err(Error::DigestMismatch {
                expected: self.spec_digest.clone(),
                found,
            });
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn skim_example() {
        let pts = [(1.0, 10.0), (2.0, 5.0), (3.0, 6.0)];
        assert_eq!(pareto_skim(&pts), vec![1, 0]);
    }

    #[test]
    fn skim_duplicates_collapse() {
        let pts = [(2.0, 3.0); 4];
        assert_eq!(pareto_skim(&pts), vec![0]);
        assert!(pareto_skim(&[]).is_empty());
    }

    #[test]
    fn skim_drops_equal_cost_slower() {
        let pts = [(2.0, 5.0), (1.0, 5.0)];
        assert_eq!(pareto_skim(&pts), vec![1]);
    }

    fn item(cost: i64, latency: f64, units: usize) -> KnapsackItem {
        KnapsackItem {
            cost: Cents(cost),
            curve: (0..=units).map(|k| if k == 0 { 0.0 } else { latency }).collect(),
        }
    }

    #[test]
    fn knapsack_budget_excludes_expensive_item() {
        let groups = vec![vec![item(1000, 5.0, 1), item(2000, 3.0, 1)]];
        let sol = knapsack_mck(&groups, Cents(1500), 1).unwrap();
        assert_eq!(sol.choice, vec![Some(0)]);
        assert_eq!(sol.value, 5.0);
        assert_eq!(sol.cost, Cents(1000));
    }

    #[test]
    fn knapsack_below_cheapest_is_empty() {
        let groups = vec![vec![item(1000, 5.0, 1)]];
        assert!(knapsack_mck(&groups, Cents(999), 1).is_none());
    }

    #[test]
    fn knapsack_prefers_cheaper_on_tie() {
        let groups = vec![vec![item(2000, 3.0, 2), item(1000, 3.0, 2)]];
        let sol = knapsack_mck(&groups, Cents(5000), 2).unwrap();
        assert_eq!(sol.choice, vec![Some(1)]);
    }

    #[test]
    fn knapsack_combines_groups() {
        // each item saturates above one unit; two units need both groups
        let sat = |cost| KnapsackItem {
            cost: Cents(cost),
            curve: vec![0.0, 1.0, f64::INFINITY],
        };
        let groups = vec![vec![sat(100)], vec![sat(200)]];
        let sol = knapsack_mck(&groups, Cents(300), 2).unwrap();
        assert_eq!(sol.choice, vec![Some(0), Some(0)]);
        assert_eq!(sol.units, vec![1, 1]);
        assert!(knapsack_mck(&groups, Cents(299), 2).is_none());
    }
}
